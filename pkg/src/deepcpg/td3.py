"""
Hierarchical TD3 training of CPG actors and deterministic deployment.

One actor decision sets the CPG goals (or, for the feed-forward baseline,
the joint goals) for ``tau_c`` environment steps. The trainer is written for
any number of agents that split the robot's joints between them: a single
agent with twin critics is plain TD3, several agents with one centralized
critic each is the modular multi-agent DDPG variant. With one agent and
``algo="ddpg"`` both paths are the same code.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .cpg import CpgParams, CpgState, Modulation, cpg_rollout, cpg_step, initial_state, random_params, \
    param_vector_size, unpack_params
from .env import CrawlerEnv, CrawlerSpec
from .errors import ConfigError, NumericError, StructuralError
from .nn import ActorNet, CriticNet, FeedForwardActor, OptimState, RunningNormalizer, adam_step, polyak_update
from .policy import actor_objective_and_grad, feedforward_objective_and_grad
from .replay import ReplayBuffer, Transition, WindowBatch


@dataclass
class TrainConfig:
    gamma: float = 0.95
    batch: int = 64
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 2.0
    babble_steps: int = 10_000
    update_every: int = 1
    policy_delay: int = 2
    tau_c: int = 5
    tau_o: int = 5
    explore_sigma: float = 0.1
    target_sigma: float = 0.2
    noise_clip: float = 0.5
    rho: float = 0.995
    buffer_size: int = 1_000_000
    actor: str = "cpg"
    algo: str = "td3"
    actor_hidden: tuple = (1024, 512)
    head_hidden: int = 512
    critic_hidden: tuple = (1024, 1024, 512, 512)
    head_init: float = 1e-3
    discount_within_window: bool = False
    normalize_obs: bool = True
    modulation: Modulation = field(default_factory=Modulation)

    def __post_init__(self):
        if self.actor not in ("cpg", "ff"):
            raise ConfigError("actor must be 'cpg' or 'ff'")
        if self.algo not in ("td3", "ddpg"):
            raise ConfigError("algo must be 'td3' or 'ddpg'")
        for name in ("batch", "tau_c", "tau_o", "policy_delay", "update_every", "buffer_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.rho <= 1.0:
            raise ConfigError("gamma and rho must lie in [0, 1]")
        if self.actor == "ff" and self.tau_c != 1:
            raise ConfigError("the feed-forward actor decides every step: tau_c must be 1")

    @property
    def n_critics(self) -> int:
        return 2 if self.algo == "td3" else 1

    @property
    def delay(self) -> int:
        return self.policy_delay if self.algo == "td3" else 1


@dataclass(frozen=True)
class AgentLayout:
    """Which joints an agent drives and how its local observation is built.

    ``obs_index`` selects columns of the full (goal-free) observation; the
    entries -1 and -2 stand for the x and y of the body velocity direction.
    """

    joints: tuple
    obs_index: tuple

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def obs_dim(self) -> int:
        return len(self.obs_index)

    def local_obs(self, full: np.ndarray, vel_cols: tuple) -> np.ndarray:
        idx = np.asarray(self.obs_index)
        out = full[..., np.maximum(idx, 0)].copy()
        if np.any(idx < 0):
            v = full[..., list(vel_cols)]
            norm = np.linalg.norm(v, axis=-1, keepdims=True)
            direction = np.where(norm > 1e-9, v / np.maximum(norm, 1e-9), 0.0)
            out[..., idx == -1] = direction[..., :1]
            out[..., idx == -2] = direction[..., 1:]
        return out


def single_layout(spec: CrawlerSpec) -> list[AgentLayout]:
    base = 2 * spec.n_joints + 3
    return [AgentLayout(tuple(range(spec.n_joints)), tuple(range(base)))]


def modular_layout(spec: CrawlerSpec) -> list[AgentLayout]:
    """Per module: own angles, own rates, velocity, yaw rate, the velocity
    direction (global context) and the other modules' joint angles.

    A lone module has no one to share context with and gets the single-agent
    observation, so a one-module system trains exactly like the single agent.
    """
    if spec.modules == 1:
        return single_layout(spec)
    nj = spec.n_joints
    per = nj // spec.modules
    out = []
    for m in range(spec.modules):
        own = list(range(m * per, (m + 1) * per))
        others = [j for k in range(spec.modules) if k != m for j in range(k * per, (k + 1) * per)]
        idx = own + [nj + j for j in own] + [2 * nj, 2 * nj + 1, 2 * nj + 2] + [-1, -2] + others
        out.append(AgentLayout(tuple(own), tuple(idx)))
    return out


@dataclass
class Agent:
    layout: AgentLayout
    actor: object
    actor_targ: object
    critics: list
    critic_targs: list
    actor_opt: OptimState
    critic_opts: list
    normalizer: RunningNormalizer

    @property
    def is_cpg(self) -> bool:
        return isinstance(self.actor, ActorNet)


class Controller:
    """Runs the agents' actors and CPGs against a stream of full observations.

    Used for exploration during training and, without noise, for deployment.
    """

    def __init__(self, agents: list[Agent], config: TrainConfig, spec: CrawlerSpec):
        self.agents = agents
        self.config = config
        self.spec = spec
        self.base_dim = 2 * spec.n_joints + 3
        self.vel_cols = (2 * spec.n_joints, 2 * spec.n_joints + 1)
        self.history: list[np.ndarray] = []
        self.goal = np.zeros(0)
        self.cpg_states: list[CpgState | None] = []
        self.cpg_params: list[CpgParams | None] = []
        self.ff_action: list[np.ndarray | None] = []
        self.actor_calls = 0

    def split(self, obs):
        return obs[: self.base_dim], obs[self.base_dim:]

    def reset(self, obs, rng: np.random.Generator):
        base, goal = self.split(obs)
        self.history = [base] * self.config.tau_o
        self.goal = goal
        self.cpg_states = [initial_state(a.layout.n, rng, dt=self.spec.dt) if a.is_cpg else None
                           for a in self.agents]
        self.cpg_params = [None] * len(self.agents)
        self.ff_action = [None] * len(self.agents)

    def observe(self, obs):
        base, goal = self.split(obs)
        self.history = self.history[1:] + [base]
        self.goal = goal

    def actor_input(self, agent: Agent, windows: np.ndarray, goal: np.ndarray) -> np.ndarray:
        """(B, tau_o, D) raw full windows + (B, G) goals -> (B, in_dim)."""
        local = agent.layout.local_obs(windows, self.vel_cols)
        if self.config.normalize_obs:
            local = agent.normalizer(local)
        return np.concatenate([local.reshape(local.shape[0], -1), goal], axis=-1)

    def decide(self, rng: np.random.Generator | None, babble: bool):
        """One decision for every agent at the start of a segment."""
        window = np.stack(self.history)[None]
        goal = self.goal[None]
        for i, agent in enumerate(self.agents):
            if agent.is_cpg:
                if babble:
                    self.cpg_params[i] = random_params(rng, agent.layout.n)
                else:
                    heads, _ = agent.actor.forward(self.actor_input(agent, window, goal))
                    self.cpg_params[i] = unpack_params([h[0] for h in heads], agent.layout.n)
                    self.actor_calls += 1
            else:
                if babble:
                    self.ff_action[i] = rng.uniform(-self.spec.s_max, self.spec.s_max, agent.layout.n)
                else:
                    y, _ = agent.actor.forward(self.actor_input(agent, window, goal))
                    self.ff_action[i] = y[0]
                    self.actor_calls += 1

    def step_action(self):
        """Joint goals for the next env step plus per-agent CPG records."""
        g = np.zeros(self.spec.n_joints)
        h, h_next, params = [], [], []
        for i, agent in enumerate(self.agents):
            if agent.is_cpg:
                before = self.cpg_states[i]
                after, y = cpg_step(self.cpg_params[i], self.config.modulation, before)
                self.cpg_states[i] = after
                g[list(agent.layout.joints)] = y
                h.append(before.to_vector())
                h_next.append(after.to_vector())
                params.append(self.cpg_params[i].to_vector())
            else:
                g[list(agent.layout.joints)] = self.ff_action[i]
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
        return g, cat(h), cat(h_next), cat(params)


def make_agents(layouts, config: TrainConfig, obs_full_dim: int, goal_dim: int, n_total: int,
                rng: np.random.Generator) -> list[Agent]:
    agents = []
    tau_o, tau_c = config.tau_o, config.tau_c
    critic_in = tau_o * obs_full_dim + goal_dim + tau_c * n_total
    for layout in layouts:
        in_dim = tau_o * layout.obs_dim + goal_dim
        if config.actor == "cpg":
            actor = ActorNet.create(in_dim, layout.n, rng, hidden=config.actor_hidden,
                                    head_hidden=config.head_hidden, head_init=config.head_init)
        else:
            actor = FeedForwardActor.create(in_dim, layout.n, rng, hidden=config.actor_hidden,
                                            head_init=config.head_init)
        # each critic draws from its own child stream so the twins start apart
        critics = [CriticNet.create(critic_in, np.random.default_rng(rng.integers(2**63)),
                                    hidden=config.critic_hidden) for _ in range(config.n_critics)]
        agents.append(assemble_agent(layout, actor, critics, config))
    return agents


def assemble_agent(layout, actor, critics, config, normalizer=None):
    opt = lambda net: OptimState.create(net.params, lr=config.lr, betas=config.betas, clip=config.grad_clip)
    return Agent(
        layout=layout, actor=actor, actor_targ=actor.copy(), critics=critics,
        critic_targs=[c.copy() for c in critics], actor_opt=opt(actor), critic_opts=[opt(c) for c in critics],
        normalizer=normalizer or RunningNormalizer.create(layout.obs_dim),
    )


@dataclass
class EpisodeRecord:
    env_steps: int
    ret: float
    length: int
    distance: float


class Trainer:
    def __init__(self, config: TrainConfig, spec: CrawlerSpec, seed: int = 0, system: str = "single",
                 agents: list[Agent] | None = None, full_normalizer: RunningNormalizer | None = None):
        if system not in ("single", "modular"):
            raise ConfigError("system must be 'single' or 'modular'")
        self.config = config
        self.spec = spec
        self.seed = seed
        self.system = system
        self.rng = np.random.default_rng(seed)
        self.env = CrawlerEnv(spec, seed=seed + 1)
        self.layouts = single_layout(spec) if system == "single" else modular_layout(spec)
        base_dim = 2 * spec.n_joints + 3
        self.goal_dim = spec.obs_dim - base_dim
        self.agents = agents or make_agents(self.layouts, config, base_dim, self.goal_dim, spec.n_joints, self.rng)
        self._check_agents()
        self.full_normalizer = full_normalizer or RunningNormalizer.create(base_dim)
        self.controller = Controller(self.agents, config, spec)
        state_dim = sum(8 * a.layout.n for a in self.agents if a.is_cpg)
        param_dim = sum(param_vector_size(a.layout.n) for a in self.agents if a.is_cpg)
        self.buffer = ReplayBuffer(config.buffer_size, config.tau_c, base_dim, spec.n_joints, state_dim,
                                   param_dim, self.goal_dim)
        self.env_steps = 0
        self.updates = 0
        self.episode = 0
        self.episode_return = 0.0
        self.episodes: list[EpisodeRecord] = []
        self.metrics: list[dict] = []
        self.obs = self.env.reset()
        self.controller.reset(self.obs, self.rng)

    def _check_agents(self):
        if len(self.agents) != len(self.layouts):
            raise StructuralError("agent count does not match the system layout")
        for a, layout in zip(self.agents, self.layouts):
            if a.layout != layout:
                raise StructuralError("agent joint or observation layout does not match the system")
            expected = self.config.tau_o * layout.obs_dim + self.goal_dim
            if a.actor.in_dim != expected or a.actor.n != layout.n:
                raise StructuralError(f"actor expects input {a.actor.in_dim}, system provides {expected}")
            critic_in = self.config.tau_o * (2 * self.spec.n_joints + 3) + self.goal_dim \
                + self.config.tau_c * self.spec.n_joints
            for c in a.critics:
                if c.in_dim != critic_in:
                    raise StructuralError(f"critic expects input {c.in_dim}, system provides {critic_in}")

    @property
    def babbling(self) -> bool:
        return self.env_steps < self.config.babble_steps

    # ---- data collection -------------------------------------------------

    def collect_segment(self, explore: bool = True) -> list[Transition]:
        """One actor decision driving up to tau_c env steps."""
        cfg, ctl = self.config, self.controller
        babble = self.babbling
        ctl.decide(self.rng, babble)
        segment = []
        for k in range(cfg.tau_c):
            g_hat, h, h_next, params = ctl.step_action()
            g = g_hat
            if explore and cfg.explore_sigma > 0:
                noise = self.rng.normal(0.0, cfg.explore_sigma, g.shape)
                g = np.clip(g_hat + noise, -self.spec.s_max, self.spec.s_max)
            obs_next, r, done, _ = self.env.step(g)
            base, goal = ctl.split(self.obs)
            t = Transition(s=base, g_j=g, s_next=ctl.split(obs_next)[0], r=r, d=done, h=h, h_next=h_next,
                           g_cpg=params, g=goal)
            self.buffer.add(t, self.episode, k, self.env.state.step - 1)
            if babble and cfg.normalize_obs:
                self._update_normalizers(base)
            segment.append(t)
            self.env_steps += 1
            self.episode_return += r
            if done:
                self.episodes.append(EpisodeRecord(self.env_steps, self.episode_return, self.env.state.step,
                                                   float(np.linalg.norm(self.env.state.pos))))
                self.episode += 1
                self.episode_return = 0.0
                self.obs = self.env.reset()
                ctl.reset(self.obs, self.rng)
                break
            self.obs = obs_next
            ctl.observe(obs_next)
        if not babble:
            for a in self.agents:
                a.normalizer.frozen = True
            self.full_normalizer.frozen = True
        return segment

    def _update_normalizers(self, base):
        self.full_normalizer.update(base[None])
        for a in self.agents:
            a.normalizer.update(a.layout.local_obs(base[None], self.controller.vel_cols))

    # ---- learning --------------------------------------------------------

    def _critic_obs(self, windows, goal):
        x = self.full_normalizer(windows) if self.config.normalize_obs else windows
        return np.concatenate([x.reshape(x.shape[0], -1), goal], axis=-1)

    def _agent_actions(self, agent_i: int, actions: np.ndarray) -> np.ndarray:
        """(B, tau_c, n_total) -> (B, tau_c * n_agent), time-major."""
        joints = list(self.agents[agent_i].layout.joints)
        a = actions[:, :, joints]
        return a.reshape(a.shape[0], -1)

    def _all_actions(self, actions):
        return np.concatenate([self._agent_actions(i, actions) for i in range(len(self.agents))], axis=-1)

    def _agent_state(self, agent_i, h):
        offset = sum(8 * a.layout.n for a in self.agents[:agent_i] if a.is_cpg)
        n = self.agents[agent_i].layout.n
        return CpgState.from_vector(h[:, offset:offset + 8 * n], n, dt=self.spec.dt)

    def _target_actions(self, batch: WindowBatch, smooth: bool) -> np.ndarray:
        """Target joint-goal windows (B, tau_c, n_total) on the shifted windows."""
        cfg = self.config
        B = batch.obs.shape[0]
        out = np.zeros((B, cfg.tau_c, self.spec.n_joints))
        for i, agent in enumerate(self.agents):
            x = self.controller.actor_input(agent, batch.next_obs, batch.next_goal)
            if agent.is_cpg:
                heads, _ = agent.actor_targ.forward(x)
                params = unpack_params(heads, agent.layout.n)
                _, ys = cpg_rollout(params, cfg.modulation, self._agent_state(i, batch.h_next), cfg.tau_c)
                acts = np.moveaxis(ys, 0, 1)
            else:
                y, _ = agent.actor_targ.forward(x)
                acts = y[:, None, :]
            out[:, :, list(agent.layout.joints)] = acts
        if smooth and cfg.target_sigma > 0:
            noise = np.clip(self.rng.normal(0.0, cfg.target_sigma, out.shape), -cfg.noise_clip, cfg.noise_clip)
            out = np.clip(out + noise, -self.spec.s_max, self.spec.s_max)
        return out

    def compute_target(self, batch: WindowBatch) -> list[np.ndarray]:
        """Per-agent regression targets y = R + gamma (1 - d) min_k Q_k^targ."""
        cfg = self.config
        next_actions = self._all_actions(self._target_actions(batch, smooth=cfg.algo == "td3"))
        x = np.concatenate([self._critic_obs(batch.next_obs, batch.next_goal), next_actions], axis=-1)
        reward = batch.discounted if cfg.discount_within_window else batch.reward
        targets = []
        for agent in self.agents:
            q = np.min(np.stack([c.forward(x)[0] for c in agent.critic_targs]), axis=0)
            targets.append(reward + cfg.gamma * (1.0 - batch.done) * q)
        return targets

    def update_step(self, batch: WindowBatch | None = None) -> dict:
        """Critic regression for every agent; delayed actor ascent and target tracking."""
        cfg = self.config
        if batch is None:
            batch = self.buffer.sample(self.rng, cfg.batch, cfg.tau_o, cfg.gamma)
        targets = self.compute_target(batch)
        obs_x = self._critic_obs(batch.obs, batch.goal)
        x = np.concatenate([obs_x, self._all_actions(batch.actions)], axis=-1)
        B = x.shape[0]

        new_critics = []
        info = {}
        for i, agent in enumerate(self.agents):
            updated = []
            for k, (critic, opt) in enumerate(zip(agent.critics, agent.critic_opts)):
                q, cache = critic.forward(x)
                err = q - targets[i]
                loss = float(np.mean(err**2))
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite critic loss for agent {i}", step=self.updates)
                grads, _ = critic.backward(cache, 2.0 * err / B)
                params, opt = adam_step(critic.params, grads, opt)
                updated.append((critic.replace_params(params), opt))
                info[f"q{k + 1}_loss_{i}"] = loss
            new_critics.append(updated)

        actor_update = (self.updates + 1) % cfg.delay == 0
        new_actors = []
        if actor_update:
            full_actions = self._all_actions(batch.actions)
            offsets = np.cumsum([0] + [cfg.tau_c * a.layout.n for a in self.agents])
            for i, agent in enumerate(self.agents):
                ax = self.controller.actor_input(agent, batch.obs, batch.goal)
                critic_x = np.concatenate([obs_x, full_actions], axis=-1)
                sl = slice(obs_x.shape[1] + offsets[i], obs_x.shape[1] + offsets[i + 1])
                if agent.is_cpg:
                    value, grads = actor_objective_and_grad(agent.actor, agent.critics[0], ax,
                                                            self._agent_state(i, batch.h), cfg.modulation,
                                                            cfg.tau_c, critic_x=critic_x, action_slice=sl)
                else:
                    value, grads = feedforward_objective_and_grad(agent.actor, agent.critics[0], ax,
                                                                  critic_x=critic_x, action_slice=sl)
                if not np.isfinite(value):
                    raise NumericError(f"non-finite actor objective for agent {i}", step=self.updates)
                # ascent on Q: hand the optimizer the negated gradient
                params, opt = adam_step(agent.actor.params, {k: -g for k, g in grads.items()}, agent.actor_opt)
                new_actors.append((agent.actor.replace_params(params), opt))
                info[f"actor_q_{i}"] = value

        # commit only after every piece succeeded
        for i, agent in enumerate(self.agents):
            agent.critics = [c for c, _ in new_critics[i]]
            agent.critic_opts = [o for _, o in new_critics[i]]
            if actor_update:
                agent.actor, agent.actor_opt = new_actors[i]
                agent.actor_targ = agent.actor_targ.replace_params(
                    polyak_update(agent.actor_targ.params, agent.actor.params, cfg.rho))
                agent.critic_targs = [t.replace_params(polyak_update(t.params, c.params, cfg.rho))
                                      for t, c in zip(agent.critic_targs, agent.critics)]
        self.updates += 1
        return info

    def train(self, env_steps: int, on_segment=None):
        """Collect and update until ``env_steps`` total environment steps."""
        cfg = self.config
        while self.env_steps < env_steps:
            self.collect_segment(explore=True)
            if not self.babbling and self.buffer.num_windows() > 0:
                for _ in range(cfg.update_every):
                    info = self.update_step()
                    self._log(info)
            if on_segment is not None:
                on_segment(self)

    def _log(self, info):
        last = self.episodes[-1].ret if self.episodes else float("nan")
        row = {"update": self.updates, "env_steps": self.env_steps, "episodes": len(self.episodes)}
        row.update(info)
        row["last_return"] = last
        self.metrics.append(row)

    def metrics_csv(self) -> str:
        fixed = ["update", "env_steps", "episodes"]
        losses = sorted({k for row in self.metrics for k in row} - set(fixed) - {"last_return"})
        keys = fixed + losses + ["last_return"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(keys)
        for row in self.metrics:
            writer.writerow([_fmt(row.get(k, "")) for k in keys])
        return buf.getvalue()

    def policy(self) -> "DeployedPolicy":
        return DeployedPolicy(self.agents, self.config, self.spec)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class DeployedPolicy:
    """Actors and normalizers needed to act; no critics."""

    agents: list
    config: TrainConfig
    spec: CrawlerSpec


@dataclass
class Rollout:
    steps: list = field(default_factory=list)      # per-step dict rows
    returns: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    work: list = field(default_factory=list)
    actor_calls: int = 0


def deploy(policy: DeployedPolicy, episodes: int, seed: int = 0, spec: CrawlerSpec | None = None,
           config: TrainConfig | None = None, record_steps: bool = False) -> Rollout:
    """Noise-free deployment: one actor inference per tau_c env steps."""
    spec = spec or policy.spec
    config = config or policy.config
    if spec.n_joints != policy.spec.n_joints or spec.obs_dim != policy.spec.obs_dim:
        raise StructuralError("policy was trained for a different robot or observation layout")
    env = CrawlerEnv(spec, seed=seed)
    rng = np.random.default_rng(seed + 7919)
    ctl = Controller(policy.agents, config, spec)
    out = Rollout()
    for ep in range(episodes):
        obs = env.reset()
        ctl.reset(obs, rng)
        total, work, done = 0.0, 0.0, False
        while not done:
            ctl.decide(None, babble=False)
            for _ in range(config.tau_c):
                g, _, _, _ = ctl.step_action()
                obs, r, done, info = env.step(g)
                total += r
                work += float(np.abs(info["torque"] * info["ds"]).sum())
                if record_steps:
                    st = env.state
                    out.steps.append(dict(episode=ep, step=st.step, x=st.pos[0], y=st.pos[1], theta=st.heading,
                                          v_x=st.world_velocity()[0], v_y=st.world_velocity()[1],
                                          yaw_rate=st.yaw_rate, z=st.z, s=st.s.copy(), g_j=g.copy(),
                                          torque=info["torque"].copy(), r=r, d=done))
                if done:
                    break
                ctl.observe(obs)
        out.returns.append(total)
        out.lengths.append(env.state.step)
        out.distances.append(float(np.linalg.norm(env.state.pos)))
        out.work.append(work)
    out.actor_calls = ctl.actor_calls
    return out
