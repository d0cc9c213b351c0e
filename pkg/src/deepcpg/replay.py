"""
Ring buffer of per-step transitions with windows assembled at sample time.

Each stored step keeps the raw observation, the joint goals actually sent,
the reward, the terminal flag, the CPG state before and after the step, the
CPG goal set, the task goal and the next observation. Steps carry their
episode id and their position inside the actor decision (segment) that
produced them, so sampled windows never cross an episode or a decision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError


@dataclass
class Transition:
    s: np.ndarray
    g_j: np.ndarray
    s_next: np.ndarray
    r: float
    d: bool
    h: np.ndarray
    h_next: np.ndarray
    g_cpg: np.ndarray
    g: np.ndarray


@dataclass
class WindowBatch:
    """Training windows, one row per sampled actor decision."""

    obs: np.ndarray          # (B, tau_o, obs_dim), oldest first
    goal: np.ndarray         # (B, goal_dim)
    actions: np.ndarray      # (B, tau_c, n) joint goals sent
    reward: np.ndarray       # (B,) undiscounted sum over the segment
    discounted: np.ndarray   # (B,) gamma^t-weighted sum
    done: np.ndarray         # (B,)
    next_obs: np.ndarray     # (B, tau_o, obs_dim)
    next_goal: np.ndarray
    h: np.ndarray            # (B, state_dim) CPG state at the segment start
    h_next: np.ndarray       # (B, state_dim) CPG state after the last step
    g_cpg: np.ndarray        # (B, param_dim)
    length: np.ndarray       # (B,) steps actually stored in the segment
    index: np.ndarray        # (B,) buffer slot of the segment start


STEP_FIELDS = ("s", "g_j", "s_next", "r", "d", "h", "h_next", "g_cpg", "g")


class ReplayBuffer:
    def __init__(self, capacity: int, tau_c: int, obs_dim: int, n: int, state_dim: int, param_dim: int,
                 goal_dim: int):
        if capacity < 1 or tau_c < 1:
            raise ValueError("capacity and tau_c must be positive")
        self.capacity = int(capacity)
        self.tau_c = int(tau_c)
        self.dims = dict(obs_dim=obs_dim, n=n, state_dim=state_dim, param_dim=param_dim, goal_dim=goal_dim)
        c = self.capacity
        self.data = {
            "s": np.zeros((c, obs_dim)),
            "g_j": np.zeros((c, n)),
            "s_next": np.zeros((c, obs_dim)),
            "r": np.zeros(c),
            "d": np.zeros(c, dtype=bool),
            "h": np.zeros((c, state_dim)),
            "h_next": np.zeros((c, state_dim)),
            "g_cpg": np.zeros((c, param_dim)),
            "g": np.zeros((c, goal_dim)),
            "episode": np.full(c, -1, dtype=np.int64),
            "seg_pos": np.zeros(c, dtype=np.int64),
            "ep_pos": np.zeros(c, dtype=np.int64),
        }
        self.total = 0
        # global indices (count of earlier additions) of finished segment starts and their lengths
        self._starts: list[int] = []
        self._lengths: list[int] = []
        self._head = 0

    @property
    def size(self) -> int:
        return min(self.total, self.capacity)

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition, episode: int, seg_pos: int, ep_pos: int):
        if not 0 <= seg_pos < self.tau_c:
            raise StructuralError(f"segment position {seg_pos} outside [0, {self.tau_c})")
        i = self.total % self.capacity
        for f in STEP_FIELDS:
            self.data[f][i] = getattr(t, f)
        self.data["episode"][i] = episode
        self.data["seg_pos"][i] = seg_pos
        self.data["ep_pos"][i] = ep_pos
        self.total += 1
        if seg_pos == self.tau_c - 1 or t.d:
            self._starts.append(self.total - 1 - seg_pos)
            self._lengths.append(seg_pos + 1)
        oldest = self.total - self.size
        while self._head < len(self._starts) and self._starts[self._head] < oldest:
            self._head += 1

    def num_windows(self) -> int:
        return len(self._starts) - self._head

    def _gather(self, g: np.ndarray, length: np.ndarray, tau_o: int, gamma: float) -> dict:
        """Windows for segment starts ``g`` (global step counts) of the given lengths."""
        cap, tau_c = self.capacity, self.tau_c
        oldest = self.total - self.size
        steps = np.arange(tau_c)
        # a terminated decision keeps its last joint goal for the missing steps
        seg = g[:, None] + np.minimum(steps, length[:, None] - 1)
        last = g + length - 1
        valid = steps < length[:, None]
        r = np.where(valid, self.data["r"][seg % cap], 0.0)
        # observations ending at g, padded with the episode's first one; steps of the
        # episode already overwritten fall back to the oldest kept one
        pos = self.data["ep_pos"][g % cap]
        back = np.arange(tau_o - 1, -1, -1)
        hist = np.maximum(g[:, None] - np.minimum(back, pos[:, None]), oldest)
        obs = self.data["s"][hist % cap]
        # the next window continues the same history through the segment and s'
        i = length[:, None] + np.arange(tau_o)
        m = i - (tau_o - 1)
        from_seg = self.data["s"][(g[:, None] + np.clip(m, 0, None)) % cap]
        from_obs = np.take_along_axis(obs, np.minimum(i, tau_o - 1)[..., None], axis=1)
        final = np.broadcast_to(self.data["s_next"][last % cap][:, None], from_seg.shape)
        next_obs = np.where((m < 0)[..., None], from_obs, np.where((m < length[:, None])[..., None], from_seg, final))
        first, last = g % cap, last % cap
        return dict(
            obs=obs, goal=self.data["g"][first], actions=self.data["g_j"][seg % cap], reward=r.sum(axis=1),
            discounted=(r * gamma ** steps).sum(axis=1), done=self.data["d"][last].astype(np.float64),
            next_obs=next_obs, next_goal=self.data["g"][last], h=self.data["h"][first],
            h_next=self.data["h_next"][last], g_cpg=self.data["g_cpg"][first], length=length, index=first,
        )

    def window(self, g: int, length: int, tau_o: int, gamma: float) -> dict:
        out = self._gather(np.array([g]), np.array([length]), tau_o, gamma)
        return {k: (v[0].item() if v[0].ndim == 0 else v[0]) for k, v in out.items()}

    def sample(self, rng: np.random.Generator, batch: int, tau_o: int, gamma: float) -> WindowBatch:
        if self.num_windows() == 0:
            raise StructuralError("no complete windows in the buffer")
        pick = rng.integers(self._head, len(self._starts), size=batch)
        g = np.array([self._starts[k] for k in pick], dtype=np.int64)
        length = np.array([self._lengths[k] for k in pick], dtype=np.int64)
        return WindowBatch(**self._gather(g, length, tau_o, gamma))

    def state_dict(self) -> tuple[dict, dict]:
        # only the filled rows are kept; from_state pads back to capacity
        arrays = {f"replay.{k}": v[: self.size] for k, v in self.data.items()}
        arrays["replay.starts"] = np.array(self._starts[self._head:], dtype=np.int64)
        arrays["replay.lengths"] = np.array(self._lengths[self._head:], dtype=np.int64)
        meta = dict(capacity=self.capacity, tau_c=self.tau_c, total=self.total, **self.dims)
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict) -> "ReplayBuffer":
        buf = cls(meta["capacity"], meta["tau_c"], meta["obs_dim"], meta["n"], meta["state_dim"],
                  meta["param_dim"], meta["goal_dim"])
        for k, v in buf.data.items():
            rows = np.asarray(arrays[f"replay.{k}"], dtype=v.dtype)
            v[: len(rows)] = rows
        buf.total = meta["total"]
        buf._starts = [int(x) for x in arrays["replay.starts"]]
        buf._lengths = [int(x) for x in arrays["replay.lengths"]]
        return buf
