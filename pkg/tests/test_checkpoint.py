import numpy as np
import pytest

from deepcpg import checkpoint
from deepcpg.cpg import Modulation
from deepcpg.env import CrawlerSpec
from deepcpg.errors import CheckpointError
from deepcpg.td3 import TrainConfig, Trainer, deploy


def tiny(**kw):
    base = dict(actor_hidden=(8, 8), head_hidden=4, critic_hidden=(8, 8, 8, 8), babble_steps=30, batch=4,
                modulation=Modulation(alpha_w=6.0), buffer_size=400)
    base.update(kw)
    return TrainConfig(**base)


def test_encode_decode_round_trip():
    arrays = {"b": np.arange(6, dtype=np.int64).reshape(2, 3), "a": np.array([1.5, np.nan]),
              "flag": np.array([True, False]), "empty": np.zeros((0, 4))}
    meta = {"x": 1, "nested": {"y": [1.0, 2.5e-300]}}
    blob = checkpoint.encode(meta, arrays)
    assert blob.startswith(checkpoint.MAGIC) and blob[len(checkpoint.MAGIC)] == checkpoint.VERSION
    m2, a2 = checkpoint.decode(blob)
    assert m2 == meta
    for k, v in arrays.items():
        assert a2[k].dtype == v.dtype and a2[k].shape == v.shape
        np.testing.assert_array_equal(a2[k], v)
    assert checkpoint.encode(m2, a2) == blob


@pytest.mark.parametrize("blob", [b"NOTACKPT", checkpoint.MAGIC + bytes([99]) + b"\0" * 8, checkpoint.MAGIC])
def test_rejects_foreign_files(blob):
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob)


def test_rejects_truncated_body():
    blob = checkpoint.encode({}, {"x": np.zeros(10)})
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-8])


@pytest.mark.parametrize("actor,system,modules", [("cpg", "single", 1), ("ff", "single", 1), ("cpg", "modular", 2)])
def test_trainer_load_then_save_is_byte_identical(tmp_path, actor, system, modules):
    kw = dict(actor="ff", tau_c=1) if actor == "ff" else {}
    tr = Trainer(tiny(algo="ddpg" if system == "modular" else "td3", **kw), CrawlerSpec(t_max=40, modules=modules),
                 seed=3, system=system)
    tr.train(90)
    path = tmp_path / "a.ckpt"
    checkpoint.save_trainer(path, tr)
    again = checkpoint.load_trainer(path)
    checkpoint.save_trainer(tmp_path / "b.ckpt", again)
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resumed_run_matches_unbroken_run(tmp_path):
    spec = CrawlerSpec(t_max=37)
    unbroken = Trainer(tiny(), spec, seed=4)
    unbroken.train(160)
    first = Trainer(tiny(), spec, seed=4)
    first.train(77)
    checkpoint.save_trainer(tmp_path / "mid.ckpt", first)
    resumed = checkpoint.load_trainer(tmp_path / "mid.ckpt")
    resumed.train(160)
    assert resumed.metrics_csv() == unbroken.metrics_csv()
    np.testing.assert_array_equal(resumed.agents[0].actor.get_flat(), unbroken.agents[0].actor.get_flat())


def test_policy_checkpoint_deploys_identically(tmp_path):
    tr = Trainer(tiny(), CrawlerSpec(t_max=30), seed=5)
    tr.train(80)
    checkpoint.save(tmp_path / "p.ckpt", *checkpoint.policy_state(tr.policy()))
    policy = checkpoint.load_policy(tmp_path / "p.ckpt")
    assert all(not a.critics for a in policy.agents)
    assert deploy(policy, 2, seed=1).returns == deploy(tr.policy(), 2, seed=1).returns
    with pytest.raises(CheckpointError):
        checkpoint.load_trainer(tmp_path / "p.ckpt")


def test_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "nope.ckpt")
