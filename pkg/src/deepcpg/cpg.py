"""
Kuramoto-oscillator CPG network used as a recurrent action layer.

One oscillator drives one joint. Per oscillator i the continuous dynamics are

    phi_dot_i = al_omega*omega_i + sum_k a_k * al_w*w_ik * sin(phi_k - phi_i - al_phi*phi_bias_ik)
    a_ddot_i  = alpha_a * (beta_a * (al_A*A_i - a_i) - a_dot_i)
    b_ddot_i  = alpha_b * (beta_b * (al_B*B_i - b_i) - b_dot_i)
    y_i       = b_i + a_i * sin(phi_i)

and they are integrated with an explicit scheme in which every rate lags
one step behind the state it advances (new rates are computed from the old
state, new states are advanced with the old rates).

All arrays may carry leading batch axes; the oscillator axis is always last
(and the last two for the n x n matrices).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError, StructuralError

# (low, high) of each parameter after the affine map of the tanh heads
PARAM_BOUNDS = {
    "w": (0.0, 1.0),
    "phi_bias": (-1.0, 1.0),
    "omega": (0.0, 1.0),
    "amp": (0.0, 1.0),
    "offset": (-1.0, 1.0),
}
HEAD_NAMES = ("w", "phi_bias", "omega", "amp", "offset")
STATE_FIELDS = ("phi", "phi_dot", "a", "a_dot", "a_ddot", "b", "b_dot", "b_ddot")


def head_sizes(n: int) -> tuple[int, int, int, int, int]:
    m = n * (n - 1) // 2
    return (m, m, n, n, n)


def param_vector_size(n: int) -> int:
    return sum(head_sizes(n))


def affine_bound(x, low, high):
    """Map x in [-1, 1] onto [low, high]."""
    return 0.5 * (x * (high - low) + (high + low))


def affine_slope(name: str) -> float:
    low, high = PARAM_BOUNDS[name]
    return 0.5 * (high - low)


@dataclass(frozen=True)
class Modulation:
    """External gains applied to the CPG parameters and the second-order
    amplitude/offset constants."""

    alpha_w: float = 600.0
    alpha_phi: float = float(np.pi)
    alpha_omega: float = 20.0
    alpha_A: float = 0.8
    alpha_B: float = 0.2
    alpha_a: float = 20.0
    beta_a: float = 5.0
    alpha_b: float = 20.0
    beta_b: float = 5.0

    def __post_init__(self):
        for name in ("alpha_w", "alpha_phi", "alpha_omega", "alpha_A", "alpha_B"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("alpha_a", "beta_a", "alpha_b", "beta_b"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.alpha_A + self.alpha_B > 1.0 + 1e-12:
            raise ValueError("alpha_A + alpha_B must not exceed 1")


@dataclass
class CpgParams:
    """The CPG goal set in pre-modulation units.

    ``w`` is symmetric with a zero diagonal, ``phi_bias`` skew-symmetric.
    """

    w: np.ndarray
    phi_bias: np.ndarray
    omega: np.ndarray
    amp: np.ndarray
    offset: np.ndarray

    @property
    def n(self) -> int:
        return self.omega.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.omega.shape[:-1]

    def to_vector(self) -> np.ndarray:
        """Packed layout [w_upper, phi_upper, omega, amp, offset]."""
        iu = np.triu_indices(self.n, k=1)
        return np.concatenate(
            [self.w[..., iu[0], iu[1]], self.phi_bias[..., iu[0], iu[1]],
             self.omega, self.amp, self.offset],
            axis=-1,
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray, n: int) -> "CpgParams":
        vec = _as_real_or_complex(vec)
        sizes = head_sizes(n)
        if vec.shape[-1] != sum(sizes):
            raise StructuralError(
                f"parameter vector has {vec.shape[-1]} entries, expected {sum(sizes)} for n={n}"
            )
        parts = np.split(vec, np.cumsum(sizes)[:-1], axis=-1)
        w = _fill_triangle(parts[0], n, symmetric=True)
        phi = _fill_triangle(parts[1], n, symmetric=False)
        return cls(w, phi, parts[2].copy(), parts[3].copy(), parts[4].copy())

    def copy(self) -> "CpgParams":
        return CpgParams(*(np.array(getattr(self, f)) for f in HEAD_NAMES))


def _as_real_or_complex(x):
    x = np.asarray(x)
    return x if np.iscomplexobj(x) else x.astype(np.float64)


def _fill_triangle(upper, n, symmetric):
    upper = _as_real_or_complex(upper)
    out = np.zeros(upper.shape[:-1] + (n, n), dtype=upper.dtype)
    iu = np.triu_indices(n, k=1)
    out[..., iu[0], iu[1]] = upper
    out[..., iu[1], iu[0]] = upper if symmetric else -upper
    return out


def unpack_params(heads, n: int) -> CpgParams:
    """Turn the five raw tanh head outputs into a bounded ``CpgParams``.

    The weight and phase-bias heads hold the strict upper triangle in
    row-major order; the lower triangle is mirrored (weights) or negated
    (phase biases).
    """
    if len(heads) != 5:
        raise StructuralError(f"expected 5 head vectors, got {len(heads)}")
    heads = [np.asarray(h, dtype=np.float64) for h in heads]
    for name, h, size in zip(HEAD_NAMES, heads, head_sizes(n)):
        if h.shape[-1] != size:
            raise StructuralError(f"head '{name}' has size {h.shape[-1]}, expected {size} for n={n}")
    bounded = [affine_bound(h, *PARAM_BOUNDS[name]) for name, h in zip(HEAD_NAMES, heads)]
    return CpgParams(
        w=_fill_triangle(bounded[0], n, symmetric=True),
        phi_bias=_fill_triangle(bounded[1], n, symmetric=False),
        omega=bounded[2],
        amp=bounded[3],
        offset=bounded[4],
    )


def random_params(rng: np.random.Generator, n: int, batch_shape=()) -> CpgParams:
    """Uniform sample over the bounded parameter box."""
    heads = [rng.uniform(-1.0, 1.0, size=tuple(batch_shape) + (s,)) for s in head_sizes(n)]
    return unpack_params(heads, n)


@dataclass
class CpgState:
    phi: np.ndarray
    phi_dot: np.ndarray
    a: np.ndarray
    a_dot: np.ndarray
    a_ddot: np.ndarray
    b: np.ndarray
    b_dot: np.ndarray
    b_ddot: np.ndarray
    t: int = 0
    dt: float = 0.01

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def n(self) -> int:
        return self.phi.shape[-1]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f) for f in STATE_FIELDS], axis=-1)

    @classmethod
    def from_vector(cls, vec, n: int, t: int = 0, dt: float = 0.01) -> "CpgState":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape[-1] != 8 * n:
            raise StructuralError(f"state vector has {vec.shape[-1]} entries, expected {8 * n}")
        parts = np.split(vec, 8, axis=-1)
        return cls(*(p.copy() for p in parts), t=t, dt=dt)

    def copy(self) -> "CpgState":
        return replace(self, **{f: np.array(getattr(self, f)) for f in STATE_FIELDS})

    def output(self) -> np.ndarray:
        return self.b + self.a * np.sin(self.phi)


def initial_state(n: int, rng: np.random.Generator | None = None, dt: float = 0.01,
                  batch_shape=()) -> CpgState:
    """Phases uniform in [0, 2pi) when ``rng`` is given, everything else at rest."""
    shape = tuple(batch_shape) + (n,)
    phi = rng.uniform(0.0, 2 * np.pi, size=shape) if rng is not None else np.zeros(shape)
    zeros = [np.zeros(shape) for _ in range(7)]
    return CpgState(phi, *zeros, t=0, dt=dt)


def coupling_arguments(params: CpgParams, mod: Modulation, phi: np.ndarray) -> np.ndarray:
    """D[..., i, k] = phi_k - phi_i - alpha_phi * phi_bias_ik."""
    return phi[..., None, :] - phi[..., :, None] - mod.alpha_phi * params.phi_bias


def _advance(params: CpgParams, mod: Modulation, s: CpgState, args: np.ndarray) -> CpgState:
    dt = s.dt
    coupling = (s.a[..., None, :] * (mod.alpha_w * params.w) * np.sin(args)).sum(axis=-1)
    phi_dot = mod.alpha_omega * params.omega + coupling
    a_ddot = mod.alpha_a * (mod.beta_a * (mod.alpha_A * params.amp - s.a) - s.a_dot)
    b_ddot = mod.alpha_b * (mod.beta_b * (mod.alpha_B * params.offset - s.b) - s.b_dot)
    return CpgState(
        phi=s.phi + s.phi_dot * dt,
        phi_dot=phi_dot,
        a=s.a + s.a_dot * dt,
        a_dot=s.a_dot + s.a_ddot * dt,
        a_ddot=a_ddot,
        b=s.b + s.b_dot * dt,
        b_dot=s.b_dot + s.b_ddot * dt,
        b_ddot=b_ddot,
        t=s.t + 1,
        dt=dt,
    )


def _check_finite(state: CpgState):
    for f in STATE_FIELDS:
        if not np.all(np.isfinite(getattr(state, f))):
            raise NumericError(f"non-finite CPG {f}", step=state.t)


def cpg_step(params: CpgParams, mod: Modulation, state: CpgState) -> tuple[CpgState, np.ndarray]:
    """Advance the network by one ``dt``; returns the new state and y."""
    if params.n != state.n:
        raise StructuralError(f"params have n={params.n}, state has n={state.n}")
    new = _advance(params, mod, state, coupling_arguments(params, mod, state.phi))
    _check_finite(new)
    return new, new.output()


def cpg_rollout(params: CpgParams, mod: Modulation, state: CpgState,
                steps: int) -> tuple[CpgState, np.ndarray]:
    """Run ``steps`` consecutive steps with fixed params.

    Returns the final state and outputs of shape (steps, ..., n).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    outputs = []
    for _ in range(steps):
        state, y = cpg_step(params, mod, state)
        outputs.append(y)
    return state, np.stack(outputs)


def steady_output_bound(mod: Modulation) -> float:
    return mod.alpha_A + mod.alpha_B


def step_smoothness_bound(state: CpgState) -> np.ndarray:
    """First-order bound on |y(t+1) - y(t)| from the rates held in ``state``."""
    return state.dt * (np.abs(state.b_dot) + np.abs(state.a_dot) + np.abs(state.a) * np.abs(state.phi_dot))
