"""
Deterministic planar crawler used in place of a rigid-body quadruped.

Each leg has a hip and a knee joint (joint 2l is the hip of leg l, 2l + 1 its
knee). Legs are ordered front-right, front-left, back-right, back-left within
a module; a body may chain several 4-legged modules front to back.

Per step and joint the PD controller computes a torque from the joint goal;
the joint is a first-order actuator whose rate is torque / inertia. A leg is
in stance while its knee angle exceeds a threshold. Stance hips moving
backwards push the body forwards; stance hips swinging forwards only brake
it, so legs have to lift during the return stroke. A leg with a frozen joint
drags and brakes at every step. Right/left push imbalance yaws the body.
Body velocity and yaw rate follow their drive through a first-order lag that
stands in for body inertia.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericError, StructuralError

GOAL_MODES = ("free", "xaxis", "goto", "waypoints")
REWARDS = ("intrinsic", "xaxis", "goto")


@dataclass(frozen=True)
class RewardCoeffs:
    c_v: float = 2.0
    c_b: float = 4.0
    c_yaw: float = 0.5
    c_z: float = 5.0
    c_j: float = 1e-3
    c_e: float = 5.0


@dataclass(frozen=True)
class CrawlerSpec:
    modules: int = 1
    kp: float = 4.0
    kd: float = 0.2
    inertia: float = 0.05
    tau_max: float = 1.0
    s_max: float = 1.0
    dt: float = 0.01
    stride_gain: float = 0.4
    yaw_gain: float = 0.5
    height_gain: float = 0.05
    tip_over: float = 0.045
    contact_threshold: float = 0.0
    body_lag: float = 0.3
    brake: float = 5.0
    jitter: float = 0.1
    t_max: int = 2000
    frozen_joints: tuple = ()
    reward: str = "intrinsic"
    goal_mode: str = "free"
    goal_distance: tuple = (5.0, 10.0)
    waypoints: tuple = ()
    switch_period: int = 100
    coeffs: RewardCoeffs = RewardCoeffs()

    def __post_init__(self):
        if self.modules < 1:
            raise ConfigError("modules must be >= 1")
        if self.reward not in REWARDS:
            raise ConfigError(f"reward must be one of {REWARDS}")
        if self.goal_mode not in GOAL_MODES:
            raise ConfigError(f"goal_mode must be one of {GOAL_MODES}")
        if self.reward == "goto" and self.goal_mode not in ("goto", "waypoints"):
            raise ConfigError("the goto reward needs goal_mode 'goto' or 'waypoints'")
        if self.goal_mode == "waypoints" and not self.waypoints:
            raise ConfigError("waypoint mode needs at least one waypoint")
        for j in self.frozen_joints:
            if not 0 <= j < self.n_joints:
                raise ConfigError(f"frozen joint {j} out of range")
        if self.dt <= 0 or self.inertia <= 0 or self.body_lag <= 0:
            raise ConfigError("dt, inertia and body_lag must be positive")
        if self.dt / self.body_lag + self.dt * self.brake * 4 >= 1.0:
            raise ConfigError("body lag and brake too stiff for dt")

    @property
    def legs(self) -> int:
        return 4 * self.modules

    @property
    def n_joints(self) -> int:
        return 2 * self.legs

    @property
    def uses_goal(self) -> bool:
        return self.goal_mode in ("goto", "waypoints")

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_joints + 3 + (2 if self.uses_goal else 0)


@dataclass
class CrawlerState:
    pos: np.ndarray           # world (x, y), m
    heading: float            # rad
    vel: np.ndarray           # body frame (forward, lateral), m/s
    yaw_rate: float           # rad/s
    z: float                  # height deviation, m
    s: np.ndarray             # joint angles, rad
    s_dot: np.ndarray         # joint rates, rad/s
    contact: np.ndarray       # per-leg stance flags
    frozen: np.ndarray        # per-joint fault mask
    stride_gain: float
    step: int = 0
    goal: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def copy(self) -> "CrawlerState":
        return replace(self, pos=self.pos.copy(), vel=self.vel.copy(), s=self.s.copy(),
                       s_dot=self.s_dot.copy(), contact=self.contact.copy(),
                       frozen=self.frozen.copy(), goal=self.goal.copy())

    def world_velocity(self) -> np.ndarray:
        return rotate(self.vel, self.heading)


def rotate(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def rest_state(spec: CrawlerSpec, heading=0.0, stride_gain=None, goal=None) -> CrawlerState:
    n = spec.n_joints
    frozen = np.zeros(n, dtype=bool)
    frozen[list(spec.frozen_joints)] = True
    return CrawlerState(
        pos=np.zeros(2), heading=float(heading), vel=np.zeros(2), yaw_rate=0.0, z=0.0,
        s=np.zeros(n), s_dot=np.zeros(n), contact=np.zeros(spec.legs, dtype=bool), frozen=frozen,
        stride_gain=spec.stride_gain if stride_gain is None else float(stride_gain),
        goal=np.zeros(2) if goal is None else np.asarray(goal, dtype=np.float64),
    )


def pd_torque(spec: CrawlerSpec, goal, s):
    """Torque of the PD loop with the actuator rate solved implicitly,
    tau = kp (g - s) - kd * s_dot with s_dot = tau / inertia, then clamped."""
    raw = spec.kp * (goal - s) * spec.inertia / (spec.inertia + spec.kd)
    return np.clip(raw, -spec.tau_max, spec.tau_max)


def leg_sides(spec: CrawlerSpec) -> np.ndarray:
    """+1 for right legs, -1 for left legs."""
    return np.tile([1.0, -1.0], spec.legs // 2)


def env_step(state: CrawlerState, g_j, spec: CrawlerSpec):
    """Advance one step. Returns (next state, observation, torque vector)."""
    g_j = np.asarray(g_j, dtype=np.float64)
    if g_j.shape != (spec.n_joints,):
        raise StructuralError(f"action has shape {g_j.shape}, expected ({spec.n_joints},)")
    if not np.all(np.isfinite(g_j)):
        raise NumericError("non-finite joint goal", step=state.step)
    dt = spec.dt
    torque = pd_torque(spec, g_j, state.s)
    torque[state.frozen] = 0.0
    s_dot = torque / spec.inertia
    s = np.clip(state.s + s_dot * dt, -spec.s_max, spec.s_max)
    s_dot = (s - state.s) / dt

    hips, knees = s[0::2], s[1::2]
    hip_rate = (hips - state.s[0::2]) / dt
    dragging = state.frozen.reshape(-1, 2).any(axis=1)
    stance = (knees > spec.contact_threshold) | dragging
    push = np.where(stance & ~dragging, np.maximum(-hip_rate, 0.0), 0.0) * state.stride_gain
    braking = np.count_nonzero((stance & (hip_rate > 0)) | dragging)
    sides = leg_sides(spec)
    drive = push.sum() / spec.modules
    turn = spec.yaw_gain * (push[sides > 0].sum() - push[sides < 0].sum()) / spec.modules

    k = dt / spec.body_lag
    forward = state.vel[0] + k * (drive - state.vel[0]) - dt * spec.brake * braking / spec.modules * state.vel[0]
    vel = np.array([forward, 0.0])
    yaw_rate = state.yaw_rate + k * (turn - state.yaw_rate)
    heading = state.heading + yaw_rate * dt
    pos = state.pos + rotate(vel, heading) * dt
    z = spec.height_gain * float(np.mean(knees))

    nxt = CrawlerState(pos=pos, heading=heading, vel=vel, yaw_rate=yaw_rate, z=z, s=s, s_dot=s_dot,
                       contact=stance, frozen=state.frozen.copy(), stride_gain=state.stride_gain,
                       step=state.step + 1, goal=state.goal.copy())
    return nxt, observe(nxt, spec), torque


def goal_direction(state: CrawlerState, eps: float = 1e-9) -> np.ndarray:
    """Unit vector towards the goal in the body frame (zeros at the goal)."""
    d = state.goal - state.pos
    dist = np.linalg.norm(d)
    if dist < eps:
        return np.zeros(2)
    return rotate(d / dist, -state.heading)


def observe(state: CrawlerState, spec: CrawlerSpec) -> np.ndarray:
    parts = [state.s, state.s_dot, state.vel, [state.yaw_rate]]
    if spec.uses_goal:
        parts.append(goal_direction(state))
    return np.concatenate(parts).astype(np.float64)


def reward_intrinsic(state: CrawlerState, coeffs: RewardCoeffs = RewardCoeffs(), speed=None) -> float:
    v = np.linalg.norm(state.vel) if speed is None else speed
    return float(coeffs.c_v * v - coeffs.c_yaw * abs(state.yaw_rate) - coeffs.c_z * abs(state.z)
                 - coeffs.c_j * np.linalg.norm(state.s) + coeffs.c_b)


def reward_xaxis(state: CrawlerState, coeffs: RewardCoeffs = RewardCoeffs()) -> float:
    # a norm of the scalar x velocity: backwards motion counts the same
    return reward_intrinsic(state, coeffs, speed=abs(state.world_velocity()[0]))


def reward_goto(state: CrawlerState, coeffs: RewardCoeffs = RewardCoeffs(), eps: float = 1e-9) -> float:
    d = state.goal - state.pos
    dist = np.linalg.norm(d)
    align = 0.0 if dist < eps else float(state.world_velocity() @ (d / dist))
    return reward_intrinsic(state, coeffs) + coeffs.c_e * align


def energy_audit(torques, ds):
    """Total work sum |tau * ds| and its per-joint breakdown."""
    torques = np.asarray(torques, dtype=np.float64)
    ds = np.asarray(ds, dtype=np.float64)
    if torques.shape != ds.shape:
        raise StructuralError(f"torque series {torques.shape} and displacement series {ds.shape} differ")
    per_joint = np.abs(torques * ds).reshape(-1, torques.shape[-1]).sum(axis=0) if torques.size else np.zeros(0)
    return float(per_joint.sum()), per_joint


class CrawlerEnv:
    """Episodic wrapper: resets, goals, rewards and termination."""

    def __init__(self, spec: CrawlerSpec, seed: int = 0):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.state: CrawlerState | None = None
        self._waypoint = 0

    @property
    def obs_dim(self) -> int:
        return self.spec.obs_dim

    @property
    def n_joints(self) -> int:
        return self.spec.n_joints

    def reset(self) -> np.ndarray:
        spec = self.spec
        heading = self.rng.uniform(-np.pi, np.pi)
        gain = spec.stride_gain * (1.0 + self.rng.uniform(-spec.jitter, spec.jitter))
        goal = np.zeros(2)
        if spec.goal_mode == "goto":
            dist = self.rng.uniform(*spec.goal_distance)
            angle = self.rng.uniform(-np.pi, np.pi)
            goal = dist * np.array([np.cos(angle), np.sin(angle)])
        elif spec.goal_mode == "waypoints":
            goal = np.asarray(spec.waypoints[0], dtype=np.float64)
        self._waypoint = 0
        self.state = rest_state(spec, heading, gain, goal)
        return observe(self.state, spec)

    def reward(self, state: CrawlerState) -> float:
        if self.spec.reward == "goto":
            return reward_goto(state, self.spec.coeffs)
        if self.spec.reward == "xaxis":
            return reward_xaxis(state, self.spec.coeffs)
        return reward_intrinsic(state, self.spec.coeffs)

    def step(self, g_j):
        """Returns (obs, reward, done, info) with info holding torque and joint motion."""
        prev = self.state
        nxt, obs, torque = env_step(prev, g_j, self.spec)
        spec = self.spec
        if spec.goal_mode == "waypoints" and nxt.step % spec.switch_period == 0:
            self._waypoint = min(self._waypoint + 1, len(spec.waypoints) - 1)
            nxt.goal = np.asarray(spec.waypoints[self._waypoint], dtype=np.float64)
            obs = observe(nxt, spec)
        self.state = nxt
        r = self.reward(nxt)
        tipped = abs(nxt.z) > spec.tip_over
        done = tipped or nxt.step >= spec.t_max
        info = {"torque": torque, "ds": nxt.s - prev.s, "tipped": tipped}
        return obs, r, done, info
