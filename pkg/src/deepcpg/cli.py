"""
Command line entry point.

Every subcommand writes CSV files (header row first) and, where a curve is
involved, a PNG next to them under the output root: ``--out``, else the
DEEPCPG_OUT environment variable, else the config's ``out`` field.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .errors import CheckpointError, ConfigError, NumericError, StructuralError
from .experiments import (ABLATION_PARAMS, Curve, ablate, energy_compare, perturb, rows_csv, toy_spec,
                          toy_train_config)
from .modular import finetune_agents, transfer_weights
from .td3 import Trainer, deploy

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.dcpg"

log = logging.getLogger("deepcpg")


# ---- helpers --------------------------------------------------------------


def load_run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "toy", False):
        run = dataclasses.replace(run, train=toy_train_config(), env=toy_spec(), eval_every=5000)
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
    return run


def out_dir(args, run: RunConfig | None = None) -> Path:
    root = args.out or os.environ.get("DEEPCPG_OUT") or (run.out if run else "runs")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_text(path: Path, text: str):
    path.write_text(text)
    log.info("wrote %s", path)


def plot_lines(path: Path, series: dict, xlabel: str, ylabel: str, title: str = ""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, (x, y) in series.items():
        ax.plot(x, y, label=str(label))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def curve_from_extra(extra: dict) -> Curve:
    data = extra.get("curve") or {}
    return Curve(list(data.get("steps", [])), list(data.get("returns", [])), list(data.get("distances", [])),
                 data.get("reached"))


def curve_extra(curve: Curve) -> dict:
    return {"steps": curve.steps, "returns": curve.returns, "distances": curve.distances, "reached": curve.reached}


def run_training(tr: Trainer, run: RunConfig, out: Path, curve: Curve, prefix: str = "") -> Curve:
    """Train to ``run.total_steps`` with periodic evaluation and checkpoints."""
    eval_seed = run.seed + 10_000
    extra = lambda: {"run": run.to_dict(), "curve": curve_extra(curve)}  # noqa: E731
    marks = []
    if run.eval_every:
        marks += list(range(run.eval_every, run.total_steps + 1, run.eval_every))
    if run.checkpoint_every:
        marks += list(range(run.checkpoint_every, run.total_steps + 1, run.checkpoint_every))
    marks = sorted(set(m for m in marks + [run.total_steps] if m > tr.env_steps))
    for mark in marks:
        tr.train(mark)
        if run.eval_every and mark % run.eval_every == 0 or mark == run.total_steps:
            roll = deploy(tr.policy(), run.eval_episodes, seed=eval_seed)
            curve.steps.append(tr.env_steps)
            curve.returns.append(float(np.mean(roll.returns)))
            curve.distances.append(float(np.mean(roll.distances)))
            log.info("%sstep %d  eval return %.1f  distance %.2f", prefix, tr.env_steps, curve.returns[-1],
                     curve.distances[-1])
        if run.checkpoint_every and mark % run.checkpoint_every == 0:
            ckpt.save_trainer(out / f"{prefix}checkpoint_{mark}.dcpg", tr, extra())
    ckpt.save_trainer(out / f"{prefix}{CHECKPOINT_NAME}", tr, extra())
    write_text(out / f"{prefix}metrics.csv", tr.metrics_csv())
    write_text(out / f"{prefix}curve.csv", curve.to_csv())
    if curve.steps:
        plot_lines(out / f"{prefix}curve.png", {"eval": (curve.steps, curve.returns)}, "env steps", "return")
    return curve


# ---- subcommands ----------------------------------------------------------


def cmd_init_config(args) -> int:
    run = load_run_config(args)
    text = run.dump()
    if args.path:
        Path(args.path).parent.mkdir(parents=True, exist_ok=True)
        write_text(Path(args.path), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        meta, arrays = ckpt.load(args.resume)
        tr = ckpt.restore_trainer(meta, arrays)
        extra = meta.get("extra", {})
        run = RunConfig.from_dict(extra["run"]) if "run" in extra else RunConfig(train=tr.config, env=tr.spec)
        if args.steps is not None:
            run = dataclasses.replace(run, total_steps=args.steps)
        out = out_dir(args, run)
        run_training(tr, run, out, curve_from_extra(extra))
        return EXIT_OK
    run = load_run_config(args)
    train, env, system = run.train, run.env, run.system
    if args.actor:
        train = dataclasses.replace(train, actor=args.actor, tau_c=1 if args.actor == "ff" else train.tau_c)
    if args.reward:
        goal_mode = "goto" if args.reward == "goto" else env.goal_mode
        env = dataclasses.replace(env, reward=args.reward, goal_mode=goal_mode)
    if args.modular:
        system = "modular"
        env = dataclasses.replace(env, modules=max(env.modules, 2))
        train = dataclasses.replace(train, algo="ddpg")
    run = dataclasses.replace(run, train=train, env=env, system=system,
                              total_steps=args.steps if args.steps is not None else run.total_steps)
    agents = full = None
    if args.finetune_from:
        source = ckpt.load_source(args.finetune_from)
        train = dataclasses.replace(train, babble_steps=0)
        run = dataclasses.replace(run, train=train)
        agents, full = finetune_agents(source, train, env, np.random.default_rng(run.seed))
    out = out_dir(args, run)
    write_text(out / "config.yaml", run.dump())
    tr = Trainer(train, env, seed=run.seed, system=system, agents=agents, full_normalizer=full)
    run_training(tr, run, out, Curve())
    return EXIT_OK


def cmd_train_modular(args) -> int:
    run = load_run_config(args)
    env = dataclasses.replace(run.env, modules=2)
    train = dataclasses.replace(run.train, algo="ddpg")
    if args.routine in (2, 3):
        if not args.source_checkpoint:
            raise ConfigError(f"routine {args.routine} needs --source-checkpoint")
        source = ckpt.load_source(args.source_checkpoint)
        train = dataclasses.replace(train, babble_steps=0)
    else:
        source = None
    if args.steps is not None:
        run = dataclasses.replace(run, total_steps=args.steps)
    agents, full, system = transfer_weights(source, train, env, args.routine, np.random.default_rng(run.seed))
    run = dataclasses.replace(run, train=train, env=env, system=system)
    out = out_dir(args, run)
    write_text(out / f"routine{args.routine}_config.yaml", run.dump())
    tr = Trainer(train, env, seed=run.seed, system=system, agents=agents, full_normalizer=full)
    run_training(tr, run, out, Curve(), prefix=f"routine{args.routine}_")
    return EXIT_OK


def cmd_deploy(args) -> int:
    policy = ckpt.load_policy(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    roll = deploy(policy, args.episodes, seed=seed, record_steps=args.record)
    out = out_dir(args)
    rows = [dict(episode=i, ret=float(r), length=int(n), distance=float(d), work=float(w))
            for i, (r, n, d, w) in enumerate(zip(roll.returns, roll.lengths, roll.distances, roll.work))]
    write_text(out / "deploy.csv", rows_csv(rows))
    if args.record:
        steps = []
        for row in roll.steps:
            flat = {k: v for k, v in row.items() if k not in ("s", "g_j", "torque")}
            for j, s in enumerate(row["s"]):
                flat[f"s{j}"] = float(s)
            flat["d"] = int(flat["d"])
            steps.append({k: (float(v) if isinstance(v, np.floating) else v) for k, v in flat.items()})
        write_text(out / "deploy_steps.csv", rows_csv(steps))
    print(f"mean return {np.mean(roll.returns):.2f} over {args.episodes} episodes, "
          f"actor calls {roll.actor_calls}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    if args.direct_only:
        reports = [gradcheck.direct_path_suite()]
    else:
        reports = [gradcheck.finite_difference_suite(), gradcheck.zero_loss_suite(), gradcheck.end_to_end_suite()]
    ok = True
    for report in reports:
        lines = list(report.lines())
        for line in lines if args.verbose else lines[-1:]:
            print(line)
        ok &= report.passed
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_ablate(args) -> int:
    policy = ckpt.load_policy(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    rows = ablate(policy, args.parameter, args.values, episodes=args.episodes, seed=seed)
    out = out_dir(args)
    write_text(out / f"ablate_{args.parameter}.csv", rows_csv(rows))
    x = [r["value"] for r in rows]
    plot_lines(out / f"ablate_{args.parameter}.png", {"mean return": (x, [r["mean"] for r in rows])},
               args.parameter, "return")
    for r in rows:
        print(f"{args.parameter}={r['value']:g}  {r['mean']:.1f} ± {r['std']:.1f}")
    return EXIT_OK


def cmd_energy(args) -> int:
    names = args.names or ["a", "b"]
    if len(names) != 2:
        raise ConfigError("--names takes exactly two labels")
    policies = {names[0]: ckpt.load_policy(args.checkpoint_a), names[1]: ckpt.load_policy(args.checkpoint_b)}
    seed = args.seed if args.seed is not None else 0
    table, trajectories = energy_compare(policies, episodes=args.episodes, seed=seed)
    out = out_dir(args)
    write_text(out / "energy.csv", rows_csv(table))
    series = {}
    for name, traj in trajectories.items():
        write_text(out / f"trajectory_{name}.csv", rows_csv(traj))
        first = [r for r in traj if r["episode"] == 0]
        series[f"{name} hip 0"] = ([r["step"] for r in first], [r["s0"] for r in first])
    plot_lines(out / "hip_trajectories.png", series, "step", "joint angle")
    for r in table:
        print(f"{r['policy']}: {r['value_J']:.2f} J  {r['t_ms_per_iter']:.3f} ms/iter  {r['T_s']:.2f} s  "
              f"distance {r['distance']:.2f} m")
    return EXIT_OK


def cmd_perturb(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = out_dir(args)
    modes = ["state", "parameter"] if args.mode == "both" else [args.mode]
    series = {}
    for mode in modes:
        trace = perturb(mode, period=args.period, steps=args.steps, seed=seed)
        write_text(out / f"perturb_{mode}.csv", trace.to_csv())
        series[mode] = (np.arange(len(trace.y)), trace.y)
        ratio = max(trace.jumps[t] / trace.bound[t] for t in trace.perturbed) if trace.perturbed else 0.0
        print(f"{mode}: max jump/bound at perturbations {ratio:.2f}, "
              f"bound respected everywhere: {bool(np.all(trace.jumps <= trace.bound + 1e-12))}")
    plot_lines(out / "perturb.png", series, "iteration", "y")
    return EXIT_OK


# ---- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="YAML run config")
    common.add_argument("--out", default=None, help="output directory (default: $DEEPCPG_OUT or config out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deepcpg", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", parents=[common], help="write a config with every default")
    p.add_argument("path", nargs="?", help="destination file (stdout when omitted)")
    p.add_argument("--toy", action="store_true", help="reduced-scale preset")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("train", parents=[common], help="train a policy")
    p.add_argument("--toy", action="store_true", help="reduced-scale preset")
    p.add_argument("--actor", choices=["cpg", "ff"], help="ff trains the feed-forward baseline (tau_c = 1)")
    p.add_argument("--reward", choices=["intrinsic", "xaxis", "goto"])
    p.add_argument("--finetune-from", help="trainer checkpoint to transfer weights from")
    p.add_argument("--resume", help="trainer checkpoint to continue")
    p.add_argument("--modular", action="store_true", help="two-module robot, one agent per module")
    p.add_argument("--steps", type=int, help="total env steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-modular", parents=[common], help="two-module training from a transfer routine")
    p.add_argument("--routine", type=int, choices=[1, 2, 3], required=True)
    p.add_argument("--source-checkpoint")
    p.add_argument("--toy", action="store_true", help="reduced-scale preset")
    p.add_argument("--steps", type=int, help="total env steps")
    p.set_defaults(func=cmd_train_modular)

    p = sub.add_parser("deploy", parents=[common], help="noise-free rollouts of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--record", action="store_true", help="also write per-step rows")
    p.set_defaults(func=cmd_deploy)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs. reference gradients")
    p.add_argument("--direct-only", action="store_true", help="direct recurrences on uncoupled networks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="vary one parameter at deployment")
    p.add_argument("checkpoint")
    p.add_argument("parameter", choices=ABLATION_PARAMS)
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--episodes", type=int, default=30)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("energy", parents=[common], help="joint work of two policies on matched episodes")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--names", nargs=2)
    p.add_argument("--episodes", type=int, default=5)
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("perturb", parents=[common], help="single-oscillator perturbation trace")
    p.add_argument("--mode", choices=["state", "parameter", "both"], default="both")
    p.add_argument("--period", type=int, default=1000)
    p.add_argument("--steps", type=int, default=2000)
    p.set_defaults(func=cmd_perturb)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, StructuralError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
