"""
Experiment harnesses behind the CLI: learning curves with evaluation, the
single-oscillator perturbation trace, deployment-time parameter ablations and
the energy comparison between two policies.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cpg import CpgParams, Modulation, PARAM_BOUNDS, cpg_step, initial_state, step_smoothness_bound
from .env import CrawlerEnv, CrawlerSpec
from .errors import ConfigError
from .td3 import DeployedPolicy, TrainConfig, Trainer, deploy


def toy_train_config(**overrides) -> TrainConfig:
    """Reduced-scale hyperparameters that learn on one CPU core in about a minute."""
    base = dict(actor_hidden=(64, 64), head_hidden=32, critic_hidden=(64, 64, 64, 64), babble_steps=5000,
                lr=1e-3, modulation=Modulation(alpha_w=6.0), buffer_size=200_000)
    base.update(overrides)
    return TrainConfig(**base)


def toy_spec(**overrides) -> CrawlerSpec:
    base = dict(t_max=250)
    base.update(overrides)
    return CrawlerSpec(**base)


def at_rest_return(spec: CrawlerSpec, seed: int = 0) -> float:
    """Return of a policy that holds every joint at zero for a full episode."""
    env = CrawlerEnv(spec, seed=seed)
    env.reset()
    total, done = 0.0, False
    while not done:
        _, r, done, _ = env.step(np.zeros(spec.n_joints))
        total += r
    return total


# ---- learning curves ------------------------------------------------------


@dataclass
class Curve:
    steps: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    reached: int | None = None          # env steps at the first evaluation above threshold

    @property
    def auc(self) -> float:
        return float(np.mean(self.returns)) if self.returns else float("nan")

    def steps_or(self, cap: int) -> int:
        return self.reached if self.reached is not None else cap

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["env_steps", "mean_return", "mean_distance"])
        for s, r, d in zip(self.steps, self.returns, self.distances):
            w.writerow([s, repr(float(r)), repr(float(d))])
        return buf.getvalue()


def train_with_eval(trainer: Trainer, max_steps: int, eval_every: int, eval_episodes: int, eval_seed: int,
                    threshold: float | None = None, on_eval=None) -> Curve:
    """Train in ``eval_every`` chunks, deploying noise-free after each.

    Stops at the first evaluation whose mean return reaches ``threshold``.
    """
    curve = Curve()
    target = trainer.env_steps
    while target < max_steps:
        target = min(target + eval_every, max_steps)
        trainer.train(target)
        roll = deploy(trainer.policy(), eval_episodes, seed=eval_seed)
        curve.steps.append(trainer.env_steps)
        curve.returns.append(float(np.mean(roll.returns)))
        curve.distances.append(float(np.mean(roll.distances)))
        if on_eval is not None:
            on_eval(trainer, curve)
        if threshold is not None and curve.returns[-1] >= threshold:
            curve.reached = trainer.env_steps
            break
    return curve


def rank_by_speed(curves: dict, cap: int) -> list:
    """Names ordered by median steps-to-threshold, ties broken by higher mean area under the curve."""
    def key(name):
        runs = curves[name]
        return (float(np.median([c.steps_or(cap) for c in runs])), -float(np.mean([c.auc for c in runs])))
    return sorted(curves, key=key)


# ---- perturbation trace ---------------------------------------------------


@dataclass
class PerturbTrace:
    mode: str
    y: np.ndarray           # output after each iteration
    bound: np.ndarray       # smoothness bound of the state entering each iteration
    perturbed: list         # iterations at which the perturbation was applied
    rows: list              # per-iteration records for CSV
    y0: float = 0.0         # output of the initial state

    @property
    def jumps(self) -> np.ndarray:
        return np.abs(np.diff(self.y, prepend=self.y0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = list(self.rows[0])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for row in self.rows:
            w.writerow([repr(float(row[k])) if isinstance(row[k], float) else row[k] for k in keys])
        return buf.getvalue()


def perturbation_iterations(period: int, steps: int) -> list:
    """Every ``period`` iterations, offset by half a period (500, 1500, ... for period 1000)."""
    if period < 2:
        raise ConfigError("period must be at least 2")
    return list(range(period // 2, steps, period))


def _random_oscillator(rng, params: CpgParams):
    omega = rng.uniform(*PARAM_BOUNDS["omega"], size=1)
    amp = rng.uniform(*PARAM_BOUNDS["amp"], size=1)
    offset = rng.uniform(*PARAM_BOUNDS["offset"], size=1)
    return replace(params, omega=omega, amp=amp, offset=offset)


def perturb(mode: str, period: int = 1000, steps: int = 2000, seed: int = 0,
            mod: Modulation | None = None) -> PerturbTrace:
    """Single oscillator whose parameters (ω, A, B) or states (φ, a, b) jump to random values."""
    if mode not in ("state", "parameter"):
        raise ConfigError("mode must be 'state' or 'parameter'")
    mod = mod or Modulation()
    rng = np.random.default_rng(seed)
    params = _random_oscillator(rng, CpgParams(np.zeros((1, 1)), np.zeros((1, 1)), None, None, None))
    state = initial_state(1, rng)
    at = set(perturbation_iterations(period, steps))
    y0 = y_prev = float(state.output()[0])
    ys, bounds, rows = [], [], []
    for t in range(steps):
        bound = float(step_smoothness_bound(state)[0])
        hit = t in at
        if hit and mode == "parameter":
            params = _random_oscillator(rng, params)
        elif hit:
            state = state.copy()
            state.phi[:] = rng.uniform(0.0, 2 * np.pi, size=1)
            state.a[:] = mod.alpha_A * rng.uniform(*PARAM_BOUNDS["amp"], size=1)
            state.b[:] = mod.alpha_B * rng.uniform(*PARAM_BOUNDS["offset"], size=1)
        state, y = cpg_step(params, mod, state)
        y = float(y[0])
        ys.append(y)
        bounds.append(bound)
        rows.append(dict(iteration=t, y=y, jump=abs(y - y_prev), bound=bound, perturbed=int(hit),
                         phi=float(state.phi[0]), a=float(state.a[0]), b=float(state.b[0]),
                         omega=float(params.omega[0]), amp=float(params.amp[0]), offset=float(params.offset[0])))
        y_prev = y
    return PerturbTrace(mode, np.array(ys), np.array(bounds), sorted(at), rows, y0)


# ---- ablation -------------------------------------------------------------

ABLATION_PARAMS = ("tau_c", "alpha_w", "alpha_phi", "alpha_A", "alpha_omega")


def default_grid(parameter: str, config: TrainConfig) -> list:
    """Values swept for ``parameter``; always contains the training value."""
    mod = config.modulation
    if parameter == "tau_c":
        grid = [1, 5, 10, 20, 50]
        trained = config.tau_c
    elif parameter == "alpha_w":
        trained = mod.alpha_w
        grid = [0.0, trained / 4, trained / 2, trained, 2 * trained]
    elif parameter == "alpha_phi":
        trained = mod.alpha_phi
        grid = [0.0, trained / 4, trained / 2, trained, 2 * trained]
    elif parameter == "alpha_A":
        trained = mod.alpha_A
        grid = [0.2, 0.4, 0.6, trained]
    elif parameter == "alpha_omega":
        trained = mod.alpha_omega
        grid = [trained / 4, trained / 2, trained, 2 * trained]
    else:
        raise ConfigError(f"parameter must be one of {ABLATION_PARAMS}")
    if trained not in grid:
        grid.append(trained)
    return sorted(set(grid))


def ablated_config(config: TrainConfig, parameter: str, value) -> TrainConfig:
    if parameter == "tau_c":
        if int(value) != value or value < 1:
            raise ConfigError("tau_c must be a positive integer")
        return replace(config, tau_c=int(value))
    if parameter not in ABLATION_PARAMS:
        raise ConfigError(f"parameter must be one of {ABLATION_PARAMS}")
    try:
        mod = replace(config.modulation, **{parameter: float(value)})
    except ValueError as e:
        raise ConfigError(f"{parameter}={value}: {e}") from e
    return replace(config, modulation=mod)


def _training_value(config: TrainConfig, parameter: str):
    return config.tau_c if parameter == "tau_c" else getattr(config.modulation, parameter)


def ablate(policy: DeployedPolicy, parameter: str, values=None, episodes: int = 30, seed: int = 0) -> list:
    """Deployment returns with only ``parameter`` changed; same episode seeds for every value."""
    values = default_grid(parameter, policy.config) if values is None else list(values)
    trained = _training_value(policy.config, parameter)
    rows = []
    for v in values:
        cfg = ablated_config(policy.config, parameter, v)
        roll = deploy(policy, episodes, seed=seed, config=cfg)
        rets = np.asarray(roll.returns)
        rows.append(dict(parameter=parameter, value=v, mean=float(rets.mean()), std=float(rets.std()),
                         episodes=episodes, mean_distance=float(np.mean(roll.distances)),
                         reference=int(v == trained)))
    return rows


def rows_csv(rows: list) -> str:
    buf = io.StringIO()
    keys = list(rows[0])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in rows:
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])
    return buf.getvalue()


# ---- energy ---------------------------------------------------------------


def energy_compare(policies: dict, episodes: int = 5, seed: int = 0):
    """Work, distance and timing per policy over the same episode seeds.

    Returns (table rows, per-step trajectory rows keyed by policy name).
    """
    table, trajectories = [], {}
    for name, policy in policies.items():
        start = time.perf_counter()
        roll = deploy(policy, episodes, seed=seed, record_steps=True)
        elapsed = time.perf_counter() - start
        steps = sum(roll.lengths)
        table.append(dict(policy=name, value_J=float(np.sum(roll.work)), t_ms_per_iter=1e3 * elapsed / steps,
                          T_s=float(np.mean(roll.lengths)) * policy.spec.dt,
                          distance=float(np.sum(roll.distances)), mean_return=float(np.mean(roll.returns)),
                          actor_calls=roll.actor_calls))
        traj = []
        for row in roll.steps:
            flat = dict(episode=row["episode"], step=row["step"], x=float(row["x"]), y=float(row["y"]))
            for j, (s, g, tq) in enumerate(zip(row["s"], row["g_j"], row["torque"])):
                flat[f"s{j}"] = float(s)
                flat[f"g{j}"] = float(g)
                flat[f"tau{j}"] = float(tq)
            traj.append(flat)
        trajectories[name] = traj
    return table, trajectories
