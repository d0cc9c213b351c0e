"""
Reverse-mode differentiation of a CPG rollout with respect to its parameters.

``backward`` is the adjoint of the discrete recurrence in ``cpg._advance`` and
includes every path (e.g. a neighbour's amplitude feeding a phase rate).
``direct_path_gradients`` instead runs the per-oscillator tangent recurrences
that keep only the direct dependencies; on uncoupled networks the two agree.
``finite_difference_gradients`` is a forward-only oracle for both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cpg import (
    HEAD_NAMES,
    STATE_FIELDS,
    CpgParams,
    CpgState,
    Modulation,
    _advance,
    _check_finite,
    affine_slope,
    coupling_arguments,
    cpg_rollout,
)
from .errors import StructuralError


@dataclass
class CpgTape:
    """Forward record of a rollout.

    ``states[f]`` has shape (steps + 1, ..., n): entry 0 is the initial state,
    entry t + 1 the state after step t. ``args[t]`` holds the coupling
    arguments phi_k - phi_i - alpha_phi * phi_bias_ik consumed by step t.
    """

    params: CpgParams
    mod: Modulation
    states: dict
    args: np.ndarray
    dt: float
    t0: int

    def __len__(self) -> int:
        return self.args.shape[0]

    @property
    def n(self) -> int:
        return self.params.n

    def state_at(self, k: int) -> CpgState:
        return CpgState(*(self.states[f][k] for f in STATE_FIELDS), t=self.t0 + k, dt=self.dt)

    def outputs(self) -> np.ndarray:
        return self.states["b"][1:] + self.states["a"][1:] * np.sin(self.states["phi"][1:])

    def replay(self) -> np.ndarray:
        """Re-run the forward pass from the recorded initial state."""
        _, ys = cpg_rollout(self.params, self.mod, self.state_at(0), len(self))
        return ys


@dataclass
class CpgGradients:
    """Loss gradients w.r.t. the packed, pre-modulation parameters."""

    w: np.ndarray
    phi_bias: np.ndarray
    omega: np.ndarray
    amp: np.ndarray
    offset: np.ndarray

    def heads(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in HEAD_NAMES]

    def to_vector(self) -> np.ndarray:
        return np.concatenate(self.heads(), axis=-1)

    def raw_head_gradients(self) -> list[np.ndarray]:
        """Chain through the affine map to gradients w.r.t. the tanh outputs."""
        return [g * affine_slope(name) for name, g in zip(HEAD_NAMES, self.heads())]


def rollout_with_tape(params: CpgParams, mod: Modulation, state: CpgState, steps: int):
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if params.n != state.n:
        raise StructuralError(f"params have n={params.n}, state has n={state.n}")
    records = {f: [getattr(state, f)] for f in STATE_FIELDS}
    args = []
    t0 = state.t
    for _ in range(steps):
        d = coupling_arguments(params, mod, state.phi)
        state = _advance(params, mod, state, d)
        _check_finite(state)
        args.append(d)
        for f in STATE_FIELDS:
            records[f].append(getattr(state, f))
    tape = CpgTape(
        params=params,
        mod=mod,
        states={f: np.stack(v) for f, v in records.items()},
        args=np.stack(args),
        dt=state.dt,
        t0=t0,
    )
    return state, tape.outputs(), tape


def _pack_pairs(full: np.ndarray, n: int, symmetric: bool) -> np.ndarray:
    iu = np.triu_indices(n, k=1)
    upper = full[..., iu[0], iu[1]]
    lower = full[..., iu[1], iu[0]]
    return upper + lower if symmetric else upper - lower


def backward(tape: CpgTape, output_grads) -> CpgGradients:
    """Accumulate dL/dparams for L with dL/dy given per step.

    ``output_grads`` has the shape of the rollout outputs, (steps, ..., n).
    """
    g_y = np.asarray(output_grads, dtype=np.float64)
    expected = tape.states["phi"][1:].shape
    if g_y.shape != expected:
        raise StructuralError(f"output_grads shape {g_y.shape} does not match outputs {expected}")

    p, mod, dt, S = tape.params, tape.mod, tape.dt, tape.states
    n = tape.n
    batch = expected[1:-1]
    adj = {f: np.zeros(batch + (n,)) for f in STATE_FIELDS}
    d_w = np.zeros(batch + (n, n))
    d_phi = np.zeros(batch + (n, n))
    d_omega = np.zeros(batch + (n,))
    d_amp = np.zeros(batch + (n,))
    d_off = np.zeros(batch + (n,))
    scaled_w = mod.alpha_w * p.w
    ka = mod.alpha_a * mod.beta_a
    kb = mod.alpha_b * mod.beta_b

    for t in range(len(tape) - 1, -1, -1):
        phi_new, a_new = S["phi"][t + 1], S["a"][t + 1]
        gy = g_y[t]
        adj["b"] = adj["b"] + gy
        adj["a"] = adj["a"] + gy * np.sin(phi_new)
        adj["phi"] = adj["phi"] + gy * a_new * np.cos(phi_new)

        a_old = S["a"][t]
        d = tape.args[t]
        sin_d, cos_d = np.sin(d), np.cos(d)
        G = adj["phi_dot"]
        # M[i, k] = d phi_dot_i / d phi_k for k != i
        M = scaled_w * a_old[..., None, :] * cos_d
        GM = G[..., :, None] * M

        g_phi = adj["phi"] + GM.sum(axis=-2) - G * M.sum(axis=-1)
        g_phi_dot = adj["phi"] * dt
        g_a_coupling = (G[..., :, None] * scaled_w * sin_d).sum(axis=-2)
        d_w += G[..., :, None] * mod.alpha_w * a_old[..., None, :] * sin_d
        d_phi -= mod.alpha_phi * GM
        d_omega += mod.alpha_omega * G

        H = adj["a_ddot"]
        d_amp += ka * mod.alpha_A * H
        g_a = adj["a"] - ka * H + g_a_coupling
        g_a_dot = adj["a_dot"] + adj["a"] * dt - mod.alpha_a * H
        g_a_ddot = adj["a_dot"] * dt

        K = adj["b_ddot"]
        d_off += kb * mod.alpha_B * K
        g_b = adj["b"] - kb * K
        g_b_dot = adj["b_dot"] + adj["b"] * dt - mod.alpha_b * K
        g_b_ddot = adj["b_dot"] * dt

        adj = {
            "phi": g_phi, "phi_dot": g_phi_dot,
            "a": g_a, "a_dot": g_a_dot, "a_ddot": g_a_ddot,
            "b": g_b, "b_dot": g_b_dot, "b_ddot": g_b_ddot,
        }

    return CpgGradients(
        w=_pack_pairs(d_w, n, symmetric=True),
        phi_bias=_pack_pairs(d_phi, n, symmetric=False),
        omega=d_omega,
        amp=d_amp,
        offset=d_off,
    )


def direct_path_gradients(tape: CpgTape, i: int, t: int) -> dict:
    """Direct-dependency partials of oscillator ``i`` after ``t`` steps.

    Returns a dict with
      ``phi_bias``: length-n vector, entry j = d phi_i^t / d phi_bias_ij
      ``w``:        length-n vector, entry j = d phi_i^t / d w_ij
      ``omega``:    d phi_i^t / d omega_i
      ``amp``:      d a_i^t / d A_i
      ``offset``:   d b_i^t / d B_i
    Each matrix entry is treated as an independent parameter and the phase
    of every neighbour j is held fixed, as in the textbook recurrences.
    Only unbatched tapes are supported.
    """
    n = tape.n
    if tape.args.ndim != 3:
        raise StructuralError("direct_path_gradients needs an unbatched tape")
    if not 0 <= i < n:
        raise IndexError(f"oscillator index {i} out of range for n={n}")
    if not 0 <= t <= len(tape):
        raise IndexError(f"step {t} out of range for a tape of length {len(tape)}")

    mod, p, dt, S = tape.mod, tape.params, tape.dt, tape.states
    a_w = mod.alpha_w
    # x: d phi_i/d phi_bias_ij, y: d phi_i/d w_ij, z: d phi_i/d omega_i, one entry per step
    x = np.zeros((t + 1, n))
    y = np.zeros((t + 1, n))
    z = np.zeros(t + 1)
    for s in range(2, t + 1):
        d = tape.args[s - 2][i]
        a_nb = S["a"][s - 2]
        gain = a_w * a_nb * p.w[i] * np.cos(d)
        x[s] = x[s - 1] + gain * (-x[s - 2] - mod.alpha_phi) * dt
        y[s] = y[s - 1] + a_w * a_nb * np.sin(d) * dt + gain * (-y[s - 2]) * dt
        z[s] = z[s - 1] + mod.alpha_omega * dt + gain.sum() * (-z[s - 2]) * dt
    x[:, i] = 0.0
    y[:, i] = 0.0

    def second_order(alpha, beta, gain_scale):
        # value, rate, acceleration sensitivities; all zero for the initial state
        v = np.zeros(t + 1)
        r = np.zeros(t + 1)
        acc = np.zeros(t + 1)
        for s in range(1, t + 1):
            v[s] = v[s - 1] + r[s - 1] * dt
            r[s] = r[s - 1] + acc[s - 1] * dt
            acc[s] = alpha * (beta * (gain_scale - v[s - 1]) - r[s - 1])
        return v[t]

    return {
        "phi_bias": x[t],
        "w": y[t],
        "omega": float(z[t]),
        "amp": float(second_order(mod.alpha_a, mod.beta_a, mod.alpha_A)),
        "offset": float(second_order(mod.alpha_b, mod.beta_b, mod.alpha_B)),
    }


def weighted_loss(outputs: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(outputs * weights))


def finite_difference_gradients(params: CpgParams, mod: Modulation, state: CpgState,
                                steps: int, output_grads, eps: float = 1e-5) -> CpgGradients:
    """Central differences of L = sum(output_grads * y) over every packed entry."""
    c = np.asarray(output_grads, dtype=np.float64)
    n = params.n
    base = params.to_vector()
    grad = np.zeros_like(base)
    for k in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[k] += eps
        lo[k] -= eps
        _, y_hi = cpg_rollout(CpgParams.from_vector(hi, n), mod, state, steps)
        _, y_lo = cpg_rollout(CpgParams.from_vector(lo, n), mod, state, steps)
        grad[k] = (weighted_loss(y_hi, c) - weighted_loss(y_lo, c)) / (2 * eps)
    sizes = np.cumsum([n * (n - 1) // 2, n * (n - 1) // 2, n, n])
    return CpgGradients(*np.split(grad, sizes))
