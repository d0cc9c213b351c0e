import csv

import pytest
import yaml

from deepcpg import cli
from deepcpg.checkpoint import MAGIC, load_policy
from deepcpg.config import RunConfig
from deepcpg.errors import NumericError

TINY = {
    "train": {"actor_hidden": [8, 8], "head_hidden": 4, "critic_hidden": [8, 8, 8, 8], "babble_steps": 50,
              "batch": 4, "buffer_size": 2000, "modulation": {"alpha_w": 6.0}},
    "env": {"t_max": 40},
    "total_steps": 150,
    "eval_every": 100,
    "eval_episodes": 1,
    "checkpoint_every": 100,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def trained(tmp_path, config):
    out = tmp_path / "base"
    assert run("train", "--config", config, "--out", out, "--seed", 1) == 0
    return out


def test_init_config_round_trip(tmp_path):
    path = tmp_path / "cfg.yaml"
    assert run("init-config", path) == 0
    assert RunConfig.load(path) == RunConfig()
    assert run("init-config", tmp_path / "toy.yaml", "--toy") == 0
    assert RunConfig.load(tmp_path / "toy.yaml").train.actor_hidden == (64, 64)


def test_train_writes_artifacts(trained):
    for name in ("config.yaml", "metrics.csv", "curve.csv", "curve.png", "checkpoint.dcpg", "checkpoint_100.dcpg"):
        assert (trained / name).exists(), name
    assert (trained / "checkpoint.dcpg").read_bytes()[:8] == MAGIC
    rows = read_csv(trained / "metrics.csv")
    assert rows and {"update", "env_steps", "q1_loss_0", "last_return"} <= set(rows[0])
    assert [int(r["env_steps"]) for r in read_csv(trained / "curve.csv")] == [100, 150]


def test_train_is_deterministic(tmp_path, config, trained):
    again = tmp_path / "again"
    assert run("train", "--config", config, "--out", again, "--seed", 1) == 0
    assert (again / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    assert (again / "checkpoint.dcpg").read_bytes() == (trained / "checkpoint.dcpg").read_bytes()


def test_resume_matches_unbroken_run(tmp_path, config, trained):
    part = tmp_path / "part"
    assert run("train", "--config", config, "--out", part, "--seed", 1, "--steps", 100) == 0
    assert run("train", "--resume", part / "checkpoint.dcpg", "--steps", 150, "--out", part) == 0
    for name in ("metrics.csv", "curve.csv", "checkpoint.dcpg"):
        assert (part / name).read_bytes() == (trained / name).read_bytes(), name


def test_output_root_from_environment(tmp_path, config, monkeypatch):
    monkeypatch.setenv("DEEPCPG_OUT", str(tmp_path / "env_root"))
    assert run("perturb", "--mode", "parameter", "--steps", 600) == 0
    assert (tmp_path / "env_root" / "perturb_parameter.csv").exists()


def test_feedforward_and_modular_training(tmp_path, config):
    ff = tmp_path / "ff"
    assert run("train", "--config", config, "--out", ff, "--actor", "ff") == 0
    assert load_policy(ff / "checkpoint.dcpg").config.tau_c == 1
    mod = tmp_path / "mod"
    assert run("train", "--config", config, "--out", mod, "--modular", "--steps", 100) == 0
    policy = load_policy(mod / "checkpoint.dcpg")
    assert len(policy.agents) == 2 and policy.spec.modules == 2


def test_finetune_and_routines(tmp_path, config, trained):
    src = trained / "checkpoint.dcpg"
    goto = tmp_path / "goto"
    assert run("train", "--config", config, "--out", goto, "--reward", "goto", "--finetune-from", src,
               "--steps", 100) == 0
    tuned = yaml.safe_load((goto / "config.yaml").read_text())
    assert tuned["env"]["reward"] == "goto" and tuned["train"]["babble_steps"] == 0
    out = tmp_path / "routines"
    for routine in (1, 2, 3):
        assert run("train-modular", "--config", config, "--out", out, "--routine", routine,
                   "--source-checkpoint", src, "--steps", 100) == 0
        assert (out / f"routine{routine}_curve.csv").exists()
    assert run("train-modular", "--config", config, "--out", out, "--routine", 2) == cli.EXIT_CONFIG


def test_deploy_and_ablate(tmp_path, trained):
    out = tmp_path / "eval"
    assert run("deploy", trained / "checkpoint.dcpg", "--episodes", 2, "--record", "--out", out) == 0
    rows = read_csv(out / "deploy.csv")
    assert len(rows) == 2 and all(int(r["length"]) <= 40 for r in rows)
    assert read_csv(out / "deploy_steps.csv")
    assert run("ablate", trained / "checkpoint.dcpg", "tau_c", "--values", 1, 10, "--episodes", 2,
               "--out", out) == 0
    rows = read_csv(out / "ablate_tau_c.csv")
    assert [float(r["value"]) for r in rows] == [1.0, 10.0]
    assert {"mean", "std", "episodes"} <= set(rows[0])


def test_energy_identical_checkpoints_give_identical_work(tmp_path, trained):
    out = tmp_path / "energy"
    ck = trained / "checkpoint.dcpg"
    assert run("energy", ck, ck, "--names", "x", "y", "--episodes", 2, "--out", out) == 0
    rows = read_csv(out / "energy.csv")
    assert {"value_J", "t_ms_per_iter", "T_s"} <= set(rows[0])
    assert rows[0]["value_J"] == rows[1]["value_J"]
    assert (out / "trajectory_x.csv").exists() and (out / "hip_trajectories.png").exists()


def test_perturb_contrast(tmp_path):
    assert run("perturb", "--out", tmp_path) == 0
    state = read_csv(tmp_path / "perturb_state.csv")
    param = read_csv(tmp_path / "perturb_parameter.csv")
    assert [int(r["iteration"]) for r in param if r["perturbed"] == "1"] == [500, 1500]
    assert all(float(r["jump"]) <= float(r["bound"]) + 1e-12 for r in param)
    assert any(float(r["jump"]) > float(r["bound"]) for r in state if r["perturbed"] == "1")


def test_gradcheck_direct_only(capsys):
    assert run("gradcheck", "--direct-only") == 0
    assert "PASS direct" in capsys.readouterr().out


def test_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {bogus: 1}\n")
    assert run("train", "--config", bad, "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("deploy", tmp_path / "missing.dcpg", "--out", tmp_path) == cli.EXIT_IO
    corrupt = tmp_path / "corrupt.dcpg"
    corrupt.write_bytes(b"not a checkpoint")
    assert run("deploy", corrupt, "--out", tmp_path) == cli.EXIT_IO

    def boom(*a, **k):
        raise NumericError("non-finite output", step=3)

    monkeypatch.setattr(cli, "perturb", boom)
    assert run("perturb", "--out", tmp_path) == cli.EXIT_NUMERIC
    codes = {cli.EXIT_OK, cli.EXIT_CHECK_FAILED, cli.EXIT_CONFIG, cli.EXIT_NUMERIC, cli.EXIT_IO}
    assert len(codes) == 5


def test_console_script_entry_point():
    from importlib.metadata import entry_points

    eps = [ep for ep in entry_points(group="console_scripts") if ep.name == "deepcpg"]
    assert eps and eps[0].value == "deepcpg.cli:main"
