"""
Self-describing binary checkpoints.

Layout: magic ``DCPGCKPT``, one version byte, a little-endian uint64 header
length, a UTF-8 JSON header with sorted keys, then the raw array bytes. The
header holds the run metadata and, for every array, its dtype, shape and byte
offset. Arrays are written in name order, so loading a file and saving it
again reproduces it byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import from_dict, to_dict
from .cpg import CpgParams, CpgState
from .env import CrawlerSpec, CrawlerState
from .errors import CheckpointError
from .modular import SourceModel
from .nn import ActorNet, CriticNet, FeedForwardActor, OptimState, RunningNormalizer
from .replay import ReplayBuffer
from .td3 import Agent, AgentLayout, DeployedPolicy, EpisodeRecord, TrainConfig, Trainer

MAGIC = b"DCPGCKPT"
VERSION = 1


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def encode(meta: dict, arrays: dict) -> bytes:
    manifest, blobs, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<")) if a.dtype.byteorder == ">" else a
        raw = a.tobytes()
        manifest[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True, default=_json_default).encode()
    return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode(data: bytes) -> tuple[dict, dict]:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 9:
        raise CheckpointError("truncated checkpoint header")
    if data[pos] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data[pos]}")
    (hlen,) = struct.unpack("<Q", data[pos + 1: pos + 9])
    start = pos + 9
    try:
        header = json.loads(data[start: start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    body = start + hlen
    arrays = {}
    for name, info in header["arrays"].items():
        lo = body + info["offset"]
        hi = lo + info["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"checkpoint truncated inside array '{name}'")
        arrays[name] = np.frombuffer(data[lo:hi], dtype=np.dtype(info["dtype"])).reshape(info["shape"]).copy()
    return header["meta"], arrays


def save(path, meta: dict, arrays: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode(meta, arrays))


def load(path) -> tuple[dict, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode(data)


# ---- networks and optimizer state -------------------------------------------

def net_state(net, name: str, arrays: dict) -> dict:
    for k, v in net.params.items():
        arrays[f"{name}.{k}"] = v
    meta = {"keys": list(net.params), "in_dim": net.in_dim, "hidden": list(net.hidden)}
    if isinstance(net, ActorNet):
        meta.update(kind="cpg_actor", n=net.n, head_hidden=net.head_hidden)
    elif isinstance(net, FeedForwardActor):
        meta.update(kind="ff_actor", n=net.n)
    else:
        meta.update(kind="critic")
    return meta


def net_from_state(meta: dict, name: str, arrays: dict):
    try:
        params = {k: arrays[f"{name}.{k}"] for k in meta["keys"]}
    except KeyError as e:
        raise CheckpointError(f"checkpoint lacks parameter {e}") from e
    hidden = tuple(meta["hidden"])
    if meta["kind"] == "cpg_actor":
        return ActorNet(meta["in_dim"], meta["n"], hidden, meta["head_hidden"], params)
    if meta["kind"] == "ff_actor":
        return FeedForwardActor(meta["in_dim"], meta["n"], hidden, params)
    return CriticNet(meta["in_dim"], hidden, params)


def opt_state(opt: OptimState, name: str, arrays: dict) -> dict:
    for k in opt.m:
        arrays[f"{name}.m.{k}"] = opt.m[k]
        arrays[f"{name}.v.{k}"] = opt.v[k]
    return {"keys": list(opt.m), "step": opt.step, "lr": opt.lr, "betas": list(opt.betas), "clip": opt.clip,
            "eps": opt.eps}


def opt_from_state(meta: dict, name: str, arrays: dict) -> OptimState:
    m = {k: arrays[f"{name}.m.{k}"] for k in meta["keys"]}
    v = {k: arrays[f"{name}.v.{k}"] for k in meta["keys"]}
    return OptimState(m, v, meta["step"], meta["lr"], tuple(meta["betas"]), meta["clip"], meta["eps"])


def norm_state(norm: RunningNormalizer, name: str, arrays: dict) -> dict:
    arrays[f"{name}.mean"] = norm.mean
    arrays[f"{name}.var"] = norm.var
    return {"count": norm.count, "frozen": norm.frozen, "min_std": norm.min_std, "clip": norm.clip}


def norm_from_state(meta: dict, name: str, arrays: dict) -> RunningNormalizer:
    return RunningNormalizer(arrays[f"{name}.mean"], arrays[f"{name}.var"], meta["count"], meta["frozen"],
                             meta["min_std"], meta["clip"])


def agent_state(agent: Agent, i: int, arrays: dict, with_critics: bool = True) -> dict:
    p = f"agent{i}"
    meta = {
        "joints": list(agent.layout.joints), "obs_index": list(agent.layout.obs_index),
        "actor": net_state(agent.actor, f"{p}.actor", arrays),
        "normalizer": norm_state(agent.normalizer, f"{p}.norm", arrays),
    }
    if with_critics:
        meta["actor_targ"] = net_state(agent.actor_targ, f"{p}.actor_targ", arrays)
        meta["actor_opt"] = opt_state(agent.actor_opt, f"{p}.actor_opt", arrays)
        meta["critics"] = [net_state(c, f"{p}.critic{k}", arrays) for k, c in enumerate(agent.critics)]
        meta["critic_targs"] = [net_state(c, f"{p}.critic_targ{k}", arrays) for k, c in enumerate(agent.critic_targs)]
        meta["critic_opts"] = [opt_state(o, f"{p}.critic_opt{k}", arrays) for k, o in enumerate(agent.critic_opts)]
    return meta


def agent_from_state(meta: dict, i: int, arrays: dict) -> Agent:
    p = f"agent{i}"
    layout = AgentLayout(tuple(meta["joints"]), tuple(meta["obs_index"]))
    actor = net_from_state(meta["actor"], f"{p}.actor", arrays)
    norm = norm_from_state(meta["normalizer"], f"{p}.norm", arrays)
    if "critics" not in meta:
        return Agent(layout, actor, actor, [], [], None, [], norm)
    return Agent(
        layout=layout, actor=actor,
        actor_targ=net_from_state(meta["actor_targ"], f"{p}.actor_targ", arrays),
        critics=[net_from_state(m, f"{p}.critic{k}", arrays) for k, m in enumerate(meta["critics"])],
        critic_targs=[net_from_state(m, f"{p}.critic_targ{k}", arrays) for k, m in enumerate(meta["critic_targs"])],
        actor_opt=opt_from_state(meta["actor_opt"], f"{p}.actor_opt", arrays),
        critic_opts=[opt_from_state(m, f"{p}.critic_opt{k}", arrays) for k, m in enumerate(meta["critic_opts"])],
        normalizer=norm,
    )


# ---- whole trainer -----------------------------------------------------------

ENV_ARRAYS = ("pos", "vel", "s", "s_dot", "contact", "frozen", "goal")
ENV_SCALARS = ("heading", "yaw_rate", "z", "stride_gain", "step")


def config_meta(config: TrainConfig, spec: CrawlerSpec) -> dict:
    return {"train": to_dict(config), "env": to_dict(spec)}


def configs_from_meta(meta: dict) -> tuple[TrainConfig, CrawlerSpec]:
    return from_dict(TrainConfig, meta["train"]), from_dict(CrawlerSpec, meta["env"])


def trainer_state(tr: Trainer, extra: dict | None = None, with_replay: bool = True) -> tuple[dict, dict]:
    arrays: dict = {}
    ctl = tr.controller
    st = tr.env.state
    for f in ENV_ARRAYS:
        arrays[f"env.{f}"] = getattr(st, f)
    arrays["ctl.history"] = np.stack(ctl.history)
    arrays["ctl.goal"] = ctl.goal
    arrays["obs"] = tr.obs
    cpg = []
    for i, (s, p, a) in enumerate(zip(ctl.cpg_states, ctl.cpg_params, ctl.ff_action)):
        entry = {}
        if s is not None:
            arrays[f"ctl.cpg_state{i}"] = s.to_vector()
            entry.update(t=s.t, dt=s.dt)
        if p is not None:
            arrays[f"ctl.cpg_params{i}"] = p.to_vector()
            entry["params"] = True
        if a is not None:
            arrays[f"ctl.ff_action{i}"] = a
            entry["ff_action"] = True
        cpg.append(entry)
    meta = {
        "kind": "trainer",
        "config": config_meta(tr.config, tr.spec),
        "seed": tr.seed,
        "system": tr.system,
        "rng": tr.rng.bit_generator.state,
        "env": {"rng": tr.env.rng.bit_generator.state, "waypoint": tr.env._waypoint,
                **{f: getattr(st, f) for f in ENV_SCALARS}},
        "controller": {"cpg": cpg, "actor_calls": ctl.actor_calls},
        "counters": {"env_steps": tr.env_steps, "updates": tr.updates, "episode": tr.episode,
                     "episode_return": tr.episode_return},
        "episodes": [[e.env_steps, e.ret, e.length, e.distance] for e in tr.episodes],
        "metrics": tr.metrics,
        "agents": [agent_state(a, i, arrays) for i, a in enumerate(tr.agents)],
        "full_normalizer": norm_state(tr.full_normalizer, "full_norm", arrays),
        "extra": extra or {},
    }
    if with_replay:
        rmeta, rarrays = tr.buffer.state_dict()
        meta["replay"] = rmeta
        arrays.update(rarrays)
    return meta, arrays


def restore_trainer(meta: dict, arrays: dict) -> Trainer:
    if meta.get("kind") != "trainer":
        raise CheckpointError("checkpoint does not hold a trainer")
    if "replay" not in meta:
        raise CheckpointError("checkpoint was saved without its replay buffer and cannot resume training")
    config, spec = configs_from_meta(meta["config"])
    agents = [agent_from_state(m, i, arrays) for i, m in enumerate(meta["agents"])]
    tr = Trainer(config, spec, seed=meta["seed"], system=meta["system"], agents=agents)
    tr.rng.bit_generator.state = meta["rng"]
    env = meta["env"]
    tr.env.rng.bit_generator.state = env["rng"]
    tr.env._waypoint = env["waypoint"]
    tr.env.state = CrawlerState(**{f: arrays[f"env.{f}"] for f in ENV_ARRAYS},
                                **{f: env[f] for f in ENV_SCALARS})
    ctl = tr.controller
    ctl.history = list(arrays["ctl.history"])
    ctl.goal = arrays["ctl.goal"]
    tr.obs = arrays["obs"]
    for i, (entry, agent) in enumerate(zip(meta["controller"]["cpg"], agents)):
        n = agent.layout.n
        ctl.cpg_states[i] = (CpgState.from_vector(arrays[f"ctl.cpg_state{i}"], n, t=entry["t"], dt=entry["dt"])
                             if "t" in entry else None)
        ctl.cpg_params[i] = CpgParams.from_vector(arrays[f"ctl.cpg_params{i}"], n) if entry.get("params") else None
        ctl.ff_action[i] = arrays[f"ctl.ff_action{i}"] if entry.get("ff_action") else None
    ctl.actor_calls = meta["controller"]["actor_calls"]
    c = meta["counters"]
    tr.env_steps, tr.updates, tr.episode, tr.episode_return = (c["env_steps"], c["updates"], c["episode"],
                                                               c["episode_return"])
    tr.episodes = [EpisodeRecord(*e) for e in meta["episodes"]]
    tr.metrics = [dict(m) for m in meta["metrics"]]
    tr.full_normalizer = norm_from_state(meta["full_normalizer"], "full_norm", arrays)
    tr.buffer = ReplayBuffer.from_state(meta["replay"], arrays)
    return tr


def policy_state(policy: DeployedPolicy, extra: dict | None = None) -> tuple[dict, dict]:
    arrays: dict = {}
    meta = {"kind": "policy", "config": config_meta(policy.config, policy.spec),
            "agents": [agent_state(a, i, arrays, with_critics=False) for i, a in enumerate(policy.agents)],
            "extra": extra or {}}
    return meta, arrays


def policy_from_state(meta: dict, arrays: dict) -> DeployedPolicy:
    """Actors and normalizers only; critics are never loaded for deployment."""
    if meta.get("kind") not in ("trainer", "policy"):
        raise CheckpointError("checkpoint holds no policy")
    config, spec = configs_from_meta(meta["config"])
    agents = []
    for i, m in enumerate(meta["agents"]):
        actor_only = {k: m[k] for k in ("joints", "obs_index", "actor", "normalizer")}
        agents.append(agent_from_state(actor_only, i, arrays))
    return DeployedPolicy(agents, config, spec)


def save_trainer(path, tr: Trainer, extra: dict | None = None, with_replay: bool = True):
    save(path, *trainer_state(tr, extra, with_replay))


def load_trainer(path) -> Trainer:
    return restore_trainer(*load(path))


def load_policy(path) -> DeployedPolicy:
    return policy_from_state(*load(path))


def source_from_state(meta: dict, arrays: dict):
    """Networks and statistics of a trainer checkpoint for weight transfer (no replay needed)."""
    if meta.get("kind") != "trainer":
        raise CheckpointError("weight transfer needs a trainer checkpoint with critics")
    config, spec = configs_from_meta(meta["config"])
    agents = [agent_from_state(m, i, arrays) for i, m in enumerate(meta["agents"])]
    return SourceModel(agents, norm_from_state(meta["full_normalizer"], "full_norm", arrays), config, spec)


def load_source(path):
    return source_from_state(*load(path))
