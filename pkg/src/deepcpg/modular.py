"""
Weight transfer between systems of different size.

Only the input layer ever changes shape: a network moved to a wider
observation or action layout keeps its trunk and heads, copies the input rows
of columns that exist in both layouts and starts the new rows small. Three
routines build a two-module system:

1. a fresh monolithic policy over all joints with one centralized critic;
2. module 1 grown from a trained single-module source, module 2 fresh;
3. both modules grown from the source, so they start as identical copies.

The same growth moves a free-locomotion policy onto a goal-conditioned task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import CrawlerSpec
from .errors import ConfigError, StructuralError
from .nn import ActorNet, FeedForwardActor, RunningNormalizer
from .td3 import Agent, TrainConfig, assemble_agent, make_agents, modular_layout, single_layout

GROW_SCALE = 1e-3


@dataclass
class SourceModel:
    """Trained networks and statistics to transfer from."""

    agents: list
    full_normalizer: RunningNormalizer
    config: TrainConfig
    spec: CrawlerSpec


def first_layer_key(net) -> str:
    if isinstance(net, ActorNet):
        return "trunk.W0"
    if isinstance(net, FeedForwardActor):
        return "ff.W0"
    return "q.W0"


def grow_input(net, column_map: np.ndarray, in_dim: int, rng: np.random.Generator, scale: float = GROW_SCALE):
    """Copy of ``net`` reading ``in_dim`` inputs; source input i feeds column_map[i]."""
    column_map = np.asarray(column_map)
    if column_map.shape != (net.in_dim,):
        raise StructuralError(f"column map has {column_map.shape[0]} entries, network reads {net.in_dim}")
    if np.any(column_map >= in_dim) or len(set(column_map[column_map >= 0].tolist())) != np.sum(column_map >= 0):
        raise StructuralError("column map targets must be distinct and inside the new input")
    key = first_layer_key(net)
    W = net.params[key]
    grown = rng.uniform(-scale, scale, size=(in_dim, W.shape[1]))
    keep = column_map >= 0
    grown[column_map[keep]] = W[keep]
    params = {k: (grown if k == key else v.copy()) for k, v in net.params.items()}
    new = net.replace_params(params)
    new.in_dim = in_dim
    return new


def window_map(tau: int, src_cols, dst_width: int, src_width: int) -> np.ndarray:
    """Map a time-major (tau, src_width) block onto (tau, dst_width) via per-column targets."""
    src_cols = np.asarray(src_cols)
    if src_cols.shape != (src_width,):
        raise StructuralError("one target per source column is required")
    rows = np.arange(tau)[:, None]
    return np.where(src_cols >= 0, rows * dst_width + src_cols, -1).ravel()


def actor_map(tau_o, src_obs_cols, dst_obs_dim, src_goal, dst_goal) -> np.ndarray:
    obs = window_map(tau_o, src_obs_cols, dst_obs_dim, len(src_obs_cols))
    goal = [tau_o * dst_obs_dim + g if g < dst_goal else -1 for g in range(src_goal)]
    return np.concatenate([obs, np.asarray(goal, dtype=np.int64)]).astype(np.int64)


def critic_map(tau_o, tau_c, src_obs_cols, dst_obs_dim, src_goal, dst_goal, n_src, action_offset) -> np.ndarray:
    """Critic input [obs window, goal, action windows]. The source's own (tau_c, n_src)
    action window lands as one agent block starting ``action_offset`` into the actions."""
    head = actor_map(tau_o, src_obs_cols, dst_obs_dim, src_goal, dst_goal)
    acts = np.arange(tau_c * n_src) + tau_o * dst_obs_dim + dst_goal + action_offset
    return np.concatenate([head, acts]).astype(np.int64)


def full_obs_cols(src_nj: int, dst_nj: int, joint_offset: int) -> np.ndarray:
    """Columns of a source robot's [s, s_dot, vel, yaw] inside a larger robot's observation."""
    j = np.arange(src_nj)
    return np.concatenate([joint_offset + j, dst_nj + joint_offset + j,
                           [2 * dst_nj, 2 * dst_nj + 1, 2 * dst_nj + 2]]).astype(np.int64)


def grow_normalizer(norm: RunningNormalizer, src_cols: np.ndarray, dim: int) -> RunningNormalizer:
    """Statistics copied onto the mapped columns; new columns stay unscaled. Frozen."""
    mean, var = np.zeros(dim), np.ones(dim)
    mean[src_cols] = norm.mean
    var[src_cols] = norm.var
    return RunningNormalizer(mean, var, norm.count, True, norm.min_std, norm.clip)


def _grown_agent(src: Agent, layout, obs_cols, goal_dims, critic_cols, critic_in, config, rng):
    src_goal, dst_goal = goal_dims
    amap = actor_map(config.tau_o, obs_cols, layout.obs_dim, src_goal, dst_goal)
    actor = grow_input(src.actor, amap, config.tau_o * layout.obs_dim + dst_goal, rng)
    critics = [grow_input(c, critic_cols, critic_in, rng) for c in src.critics]
    agent = assemble_agent(layout, actor, critics, config,
                            normalizer=grow_normalizer(src.normalizer, obs_cols, layout.obs_dim))
    return agent


def _check_source(source: SourceModel, config: TrainConfig):
    if len(source.agents) != 1 or source.spec.modules != 1:
        raise StructuralError("the source must be a trained single-module policy")
    if source.config.tau_o != config.tau_o or source.config.tau_c != config.tau_c:
        raise StructuralError("source and target must share tau_o and tau_c")
    if source.config.actor != config.actor:
        raise StructuralError("source and target actors are of different kinds")
    src = source.agents[0]
    if len(src.critics) < config.n_critics:
        raise StructuralError(f"source has {len(src.critics)} critics, target needs {config.n_critics}")


def _source_for(config: TrainConfig, source: SourceModel) -> Agent:
    src = source.agents[0]
    # a twin-critic source feeds a single-critic target through its first critic
    return Agent(src.layout, src.actor, src.actor_targ, src.critics[: config.n_critics],
                 src.critic_targs[: config.n_critics], src.actor_opt, src.critic_opts, src.normalizer)


def transfer_weights(source: SourceModel | None, config: TrainConfig, spec: CrawlerSpec, routine: int,
                     rng: np.random.Generator):
    """Agents and critic normalizer for a modular system built by ``routine``.

    Returns (agents, full_normalizer, system) ready for ``Trainer``.
    """
    if routine not in (1, 2, 3):
        raise ConfigError("routine must be 1, 2 or 3")
    nj = spec.n_joints
    base = 2 * nj + 3
    goal = spec.obs_dim - base
    if routine == 1:
        # one actor over every joint, one centralized critic
        agents = make_agents(single_layout(spec), config, base, goal, nj, rng)
        return agents, None, "single"
    if source is None:
        raise ConfigError(f"routine {routine} needs a source checkpoint")
    _check_source(source, config)
    if spec.modules != 2:
        raise ConfigError("the transfer routines build a two-module system")
    src = _source_for(config, source)
    src_nj = source.spec.n_joints
    src_goal = source.spec.obs_dim - (2 * src_nj + 3)
    layouts = modular_layout(spec)
    per = nj // spec.modules
    if per != src_nj:
        raise StructuralError("module size differs from the source robot")
    critic_in = config.tau_o * base + goal + config.tau_c * nj
    fresh = make_agents(layouts, config, base, goal, nj, rng)
    agents = []
    for m, layout in enumerate(layouts):
        if routine == 2 and m > 0:
            agents.append(fresh[m])
            continue
        # the module's local observation starts with the source robot's full observation
        obs_cols = np.arange(2 * src_nj + 3)
        ccols = critic_map(config.tau_o, config.tau_c, full_obs_cols(src_nj, nj, m * per), base, src_goal, goal,
                           src_nj, action_offset=m * config.tau_c * per)
        agents.append(_grown_agent(src, layout, obs_cols, (src_goal, goal), ccols, critic_in, config, rng))
    if routine == 3:
        # identical modules: module 2 is an exact copy of module 1's grown networks
        a = agents[0]
        for m in range(1, len(agents)):
            b = agents[m]
            agents[m] = assemble_agent(b.layout, a.actor.copy(), b.critics, config,
                                        normalizer=RunningNormalizer(a.normalizer.mean.copy(), a.normalizer.var.copy(),
                                                                     a.normalizer.count, True, a.normalizer.min_std,
                                                                     a.normalizer.clip))
    full = grow_full_normalizer(source.full_normalizer, src_nj, nj, spec.modules)
    return agents, full, "modular"


def grow_full_normalizer(norm: RunningNormalizer, src_nj: int, nj: int, modules: int) -> RunningNormalizer:
    """Every module's joints share the source statistics; body terms copy over."""
    mean, var = np.zeros(2 * nj + 3), np.ones(2 * nj + 3)
    for m in range(modules):
        cols = full_obs_cols(src_nj, nj, m * src_nj)
        mean[cols] = norm.mean
        var[cols] = norm.var
    return RunningNormalizer(mean, var, norm.count, True, norm.min_std, norm.clip)


def finetune_agents(source: SourceModel, config: TrainConfig, spec: CrawlerSpec, rng: np.random.Generator):
    """Move a single-module policy onto ``spec`` (typically adding goal inputs).

    Returns (agents, full_normalizer) with fresh optimizer moments.
    """
    _check_source(source, config)
    if spec.modules != 1:
        raise StructuralError("fine-tuning keeps the single-module robot")
    src = _source_for(config, source)
    nj = spec.n_joints
    base = 2 * nj + 3
    goal = spec.obs_dim - base
    src_goal = source.spec.obs_dim - base
    cols = np.arange(base)
    layout = single_layout(spec)[0]
    critic_in = config.tau_o * base + goal + config.tau_c * nj
    ccols = critic_map(config.tau_o, config.tau_c, cols, base, src_goal, goal, nj, 0)
    agent = _grown_agent(src, layout, cols, (src_goal, goal), ccols, critic_in, config, rng)
    full = RunningNormalizer(source.full_normalizer.mean.copy(), source.full_normalizer.var.copy(),
                             source.full_normalizer.count, True, source.full_normalizer.min_std,
                             source.full_normalizer.clip)
    return [agent], full
