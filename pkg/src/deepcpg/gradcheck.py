"""Gradient oracle suites behind the ``gradcheck`` command."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cpg import Modulation, initial_state, random_params
from .cpg_grad import backward, direct_path_gradients, finite_difference_gradients, rollout_with_tape

# alpha_w = 600 makes the default 10 ms step chaotic over 20 steps; the
# finite-difference oracle is only meaningful on the 1 ms grid.
GRADCHECK_DT = 1e-3


def random_case(n, steps, seed, dt=GRADCHECK_DT, mod=None):
    """Random params, random (finite, moving) state and random loss weights."""
    rng = np.random.default_rng(seed)
    mod = mod or Modulation()
    params = random_params(rng, n)
    state = initial_state(n, rng, dt=dt)
    state.phi_dot[:] = rng.normal(0.0, 10.0, n)
    state.a[:] = rng.uniform(0.0, 1.0, n)
    state.a_dot[:] = rng.normal(0.0, 1.0, n)
    state.a_ddot[:] = rng.normal(0.0, 5.0, n)
    state.b[:] = rng.uniform(-0.5, 0.5, n)
    state.b_dot[:] = rng.normal(0.0, 1.0, n)
    state.b_ddot[:] = rng.normal(0.0, 5.0, n)
    weights = rng.normal(size=(steps, n))
    return params, mod, state, weights


def compare_gradients(analytic, reference, rtol=1e-4, floor=1e-7):
    """Entry passes when |a - r| <= floor or |a - r| / max(|a|, |r|) < rtol.

    Returns (ok, worst relative error among entries above the floor).
    """
    a = np.ravel(analytic)
    r = np.ravel(reference)
    diff = np.abs(a - r)
    scale = np.maximum(np.abs(a), np.abs(r))
    rel = np.where(diff > floor, diff / np.maximum(scale, floor), 0.0)
    worst = float(rel.max()) if rel.size else 0.0
    return worst < rtol, worst


def loss_gradients_from_direct(tape, i, t):
    """Chain the direct state partials of oscillator i to L = y_i^t."""
    d = direct_path_gradients(tape, i, t)
    phi, a = tape.states["phi"][t][i], tape.states["a"][t][i]
    dy_dphi = a * np.cos(phi)
    return {
        "w": dy_dphi * d["w"],
        "phi_bias": dy_dphi * d["phi_bias"],
        "omega": dy_dphi * d["omega"],
        "amp": np.sin(phi) * d["amp"],
        "offset": d["offset"],
    }


def _pair_index(n, i, j):
    i, j = min(i, j), max(i, j)
    return i * n - i * (i + 1) // 2 + (j - i - 1)


@dataclass
class CaseResult:
    label: str
    worst: float
    passed: bool


@dataclass
class SuiteReport:
    name: str
    tolerance: float
    cases: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def worst(self) -> float:
        return max((c.worst for c in self.cases), default=0.0)

    def lines(self):
        for c in self.cases:
            yield f"{'PASS' if c.passed else 'FAIL'} {self.name} {c.label} worst={c.worst:.3e}"
        yield (f"{'PASS' if self.passed else 'FAIL'} {self.name}: {len(self.cases)} cases, "
               f"worst={self.worst:.3e}, tol={self.tolerance:g}, {self.seconds:.2f}s")


def finite_difference_suite(sizes=(2, 4, 8), steps=(5, 20), seeds=range(10),
                            rtol=1e-4, floor=1e-7, eps=1e-5, dt=GRADCHECK_DT) -> SuiteReport:
    report = SuiteReport("fd", rtol)
    start = time.perf_counter()
    for n in sizes:
        for T in steps:
            for seed in seeds:
                params, mod, state, weights = random_case(n, T, seed, dt=dt)
                _, _, tape = rollout_with_tape(params, mod, state, T)
                g = backward(tape, weights).to_vector()
                f = finite_difference_gradients(params, mod, state, T, weights, eps=eps).to_vector()
                ok, worst = compare_gradients(g, f, rtol=rtol, floor=floor)
                report.cases.append(CaseResult(f"n={n} steps={T} seed={seed}", worst, ok))
    report.seconds = time.perf_counter() - start
    return report


def direct_path_suite(cases=50, atol=1e-10, dt=0.01, seed=0) -> SuiteReport:
    """Direct recurrences vs. full reverse mode on uncoupled networks."""
    report = SuiteReport("direct", atol)
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    for k in range(cases):
        n = int(rng.integers(1, 9))
        T = int(rng.integers(1, 31))
        params, mod, state, _ = random_case(n, T, int(rng.integers(2**31)), dt=dt)
        params.w[:] = 0.0
        _, ys, tape = rollout_with_tape(params, mod, state, T)
        worst = 0.0
        for i in range(n):
            c = np.zeros_like(ys)
            c[T - 1, i] = 1.0
            g = backward(tape, c)
            d = loss_gradients_from_direct(tape, i, T)
            diffs = [abs(d["omega"] - g.omega[i]), abs(d["amp"] - g.amp[i]), abs(d["offset"] - g.offset[i])]
            for j in range(n):
                if j == i:
                    continue
                m = _pair_index(n, i, j)
                diffs.append(abs(d["w"][j] - g.w[m]))
                sign = 1.0 if i < j else -1.0
                diffs.append(abs(sign * d["phi_bias"][j] - g.phi_bias[m]))
            worst = max(worst, max(diffs))
        report.cases.append(CaseResult(f"case={k} n={n} steps={T}", worst, worst <= atol))
    report.seconds = time.perf_counter() - start
    return report


def zero_loss_suite(n=4, steps=5) -> SuiteReport:
    report = SuiteReport("zero-loss", 0.0)
    params, mod, state, weights = random_case(n, steps, 0)
    _, _, tape = rollout_with_tape(params, mod, state, steps)
    g = backward(tape, np.zeros_like(weights)).to_vector()
    worst = float(np.abs(g).max())
    report.cases.append(CaseResult(f"n={n} steps={steps}", worst, worst == 0.0))
    return report


def end_to_end_suite(seeds=range(3), rtol=1e-3, n=2, steps=5, obs_dim=3, hidden=(8, 8), head_hidden=6,
                     critic_hidden=(8, 8, 6, 6)) -> SuiteReport:
    """Actor -> unpack -> CPG rollout -> critic, analytic vs. central differences
    on every actor weight."""
    from .nn import ActorNet, CriticNet
    from .policy import actor_objective_and_grad

    report = SuiteReport("actor-through-cpg", rtol)
    start = time.perf_counter()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tau_o = 2
        actor = ActorNet.create(tau_o * obs_dim, n, rng, hidden=hidden, head_hidden=head_hidden,
                                head_init=0.5)
        critic = CriticNet.create(tau_o * obs_dim + steps * n, rng, hidden=critic_hidden)
        # a unit-scale output layer keeps the checked gradients well above the floor
        last = f"q.W{len(critic_hidden)}"
        critic.params[last] = rng.normal(size=critic.params[last].shape)
        batch = 3
        obs = rng.normal(size=(batch, tau_o * obs_dim))
        mod = Modulation(alpha_w=20.0)
        state = initial_state(n, rng, dt=0.01, batch_shape=(batch,))
        state.a[:] = rng.uniform(0, 0.8, state.a.shape)

        def objective(a):
            return actor_objective_and_grad(a, critic, obs, state, mod, steps)

        value, grads = objective(actor)
        flat = actor.get_flat()
        fd = np.zeros_like(flat)
        eps = 1e-6
        for k in range(flat.size):
            hi = flat.copy()
            hi[k] += eps
            lo = flat.copy()
            lo[k] -= eps
            fd[k] = (objective(actor.with_flat(hi))[0] - objective(actor.with_flat(lo))[0]) / (2 * eps)
        ok, worst = compare_gradients(actor.flatten_grads(grads), fd, rtol=rtol, floor=1e-8)
        report.cases.append(CaseResult(f"seed={seed}", worst, ok))
    report.seconds = time.perf_counter() - start
    return report
