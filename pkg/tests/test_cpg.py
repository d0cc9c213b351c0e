import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from deepcpg.cpg import (
    CpgParams,
    CpgState,
    Modulation,
    cpg_rollout,
    cpg_step,
    head_sizes,
    initial_state,
    random_params,
    step_smoothness_bound,
    unpack_params,
)
from deepcpg.errors import NumericError, StructuralError


def zero_heads(n):
    return [np.zeros(s) for s in head_sizes(n)]


def test_unpack_midpoint():
    p = unpack_params(zero_heads(2), 2)
    assert p.w[0, 1] == 0.5 and p.w[1, 0] == 0.5
    assert p.phi_bias[0, 1] == 0.0
    np.testing.assert_array_equal(p.omega, [0.5, 0.5])
    np.testing.assert_array_equal(p.amp, [0.5, 0.5])
    np.testing.assert_array_equal(p.offset, [0.0, 0.0])


def test_head_sizes_four_nodes():
    assert head_sizes(4) == (6, 6, 4, 4, 4)


def test_unpack_endpoints():
    heads = zero_heads(3)
    heads[0] = np.array([1.0, -1.0, 1.0])
    p = unpack_params(heads, 3)
    np.testing.assert_array_equal(p.w, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])


def test_unpack_size_mismatch():
    heads = zero_heads(4)
    heads[1] = np.zeros(5)
    with pytest.raises(StructuralError):
        unpack_params(heads, 4)
    with pytest.raises(StructuralError):
        unpack_params(heads[:4], 4)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_unpack_symmetry_and_bounds(n, seed):
    rng = np.random.default_rng(seed)
    heads = [np.tanh(rng.normal(scale=3.0, size=s)) for s in head_sizes(n)]
    p = unpack_params(heads, n)
    np.testing.assert_array_equal(p.w, p.w.T)
    np.testing.assert_array_equal(np.diag(p.w), 0.0)
    np.testing.assert_array_equal(p.phi_bias, -p.phi_bias.T)
    assert np.all((p.w >= 0) & (p.w <= 1))
    assert np.all(np.abs(p.phi_bias) <= 1)
    assert np.all((p.omega >= 0) & (p.omega <= 1))
    assert np.all((p.amp >= 0) & (p.amp <= 1))
    assert np.all(np.abs(p.offset) <= 1)


def test_vector_round_trip():
    rng = np.random.default_rng(3)
    p = random_params(rng, 5, batch_shape=(3,))
    q = CpgParams.from_vector(p.to_vector(), 5)
    for f in ("w", "phi_bias", "omega", "amp", "offset"):
        np.testing.assert_array_equal(getattr(p, f), getattr(q, f))


def test_modulation_rejects_overfull_range():
    with pytest.raises(ValueError):
        Modulation(alpha_A=0.9, alpha_B=0.2)
    with pytest.raises(ValueError):
        Modulation(alpha_w=-1.0)


def test_single_oscillator_phase_advance():
    mod = Modulation()
    p = unpack_params([np.zeros(0), np.zeros(0), np.array([0.3]), np.zeros(1), np.zeros(1)], 1)
    s = initial_state(1, dt=0.01)
    s, _ = cpg_step(p, mod, s)
    rate = mod.alpha_omega * p.omega[0]
    for _ in range(50):
        prev = s.phi[0]
        s, _ = cpg_step(p, mod, s)
        assert s.phi[0] - prev == pytest.approx(rate * 0.01, rel=1e-12)


def second_order_closed_form(alpha, beta, target, x0, v0, t):
    """x(t) for x'' = alpha*(beta*(target - x) - x') via the matrix exponential."""
    A = np.array([[0.0, 1.0], [-alpha * beta, -alpha]])
    dev = expm(A * t) @ np.array([x0 - target, v0])
    return target + dev[0]


def closed_form_settle_time(alpha, beta, gap, tol):
    t = 0.0
    while abs(second_order_closed_form(alpha, beta, 0.0, gap, 0.0, t)) >= tol:
        t += 0.01
    return t


def test_closed_form_oracle_matches_critical_damping_formula():
    # independent check of the oracle itself: (1 + w t) exp(-w t) for beta = alpha/4
    w = 10.0
    for t in (0.1, 0.5, 1.0):
        expected = 0.8 - 0.8 * (1 + w * t) * np.exp(-w * t)
        assert second_order_closed_form(20.0, 5.0, 0.8, 0.0, 0.0, t) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_amplitude_offset_equilibrium(seed):
    rng = np.random.default_rng(seed)
    mod = Modulation()
    n = 3
    p = unpack_params([np.zeros(3), rng.uniform(-1, 1, 3), -np.ones(n),
                       rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)], n)
    p.w[:] = 0.0
    s = initial_state(n, rng)
    phi0 = s.phi.copy()
    gap = max(np.max(mod.alpha_A * p.amp), np.max(np.abs(mod.alpha_B * p.offset)))
    horizon = closed_form_settle_time(mod.alpha_a, mod.beta_a, gap, 1e-5)
    steps = int(np.ceil(horizon / s.dt))
    s, ys = cpg_rollout(p, mod, s, steps)
    np.testing.assert_allclose(s.a, mod.alpha_A * p.amp, atol=1e-4)
    np.testing.assert_allclose(s.b, mod.alpha_B * p.offset, atol=1e-4)
    np.testing.assert_array_equal(s.phi, phi0)
    np.testing.assert_allclose(ys[-1], mod.alpha_B * p.offset + mod.alpha_A * p.amp * np.sin(phi0), atol=2e-4)


def test_amplitude_converges_to_scaled_target():
    mod = Modulation()
    p = unpack_params([np.zeros(0), np.zeros(0), np.array([-1.0]), np.array([0.4]), np.zeros(1)], 1)
    s = initial_state(1)
    s, _ = cpg_rollout(p, mod, s, 400)
    assert abs(s.a[0] - mod.alpha_A * p.amp[0]) < 1e-4


def rk4_phase_pair(omega, w, bias, a_w, a_phi, phi0, dt, steps):
    """Independent integrator of two coupled phases with unit amplitudes."""

    def f(phi):
        d01 = phi[1] - phi[0] - a_phi * bias
        d10 = phi[0] - phi[1] + a_phi * bias
        return np.array([omega + a_w * w * np.sin(d01), omega + a_w * w * np.sin(d10)])

    phi = np.array(phi0, dtype=float)
    for _ in range(steps):
        k1 = f(phi)
        k2 = f(phi + 0.5 * dt * k1)
        k3 = f(phi + 0.5 * dt * k2)
        k4 = f(phi + dt * k3)
        phi = phi + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return phi


def wrap(x):
    return (x + np.pi) % (2 * np.pi) - np.pi


@pytest.mark.parametrize("seed", range(4))
def test_two_oscillators_lock_to_phase_bias(seed):
    rng = np.random.default_rng(seed)
    mod = Modulation(alpha_A=1.0, alpha_B=0.0)
    bias = rng.uniform(-1, 1)
    omega = rng.uniform(0, 1)
    p = unpack_params([np.array([0.0]), np.array([bias]), np.full(2, 2 * omega - 1),
                       np.ones(2), np.zeros(2)], 2)
    dt = 1e-3
    s = initial_state(2, rng, dt=dt)
    s.a[:] = 1.0
    phi0 = s.phi.copy()
    s, _ = cpg_rollout(p, mod, s, int(2.0 / dt))
    np.testing.assert_array_equal(s.a, 1.0)
    target = mod.alpha_phi * p.phi_bias[0, 1]
    assert abs(wrap(s.phi[1] - s.phi[0] - target)) < 1e-3
    ref = rk4_phase_pair(mod.alpha_omega * p.omega[0], p.w[0, 1], p.phi_bias[0, 1],
                         mod.alpha_w, mod.alpha_phi, phi0, dt / 10, int(2.0 / (dt / 10)))
    assert abs(wrap(ref[1] - ref[0] - target)) < 1e-3


def test_rollout_single_step_matches_step():
    rng = np.random.default_rng(0)
    p = random_params(rng, 4)
    s = initial_state(4, rng)
    s1, y1 = cpg_step(p, Modulation(), s)
    s2, ys = cpg_rollout(p, Modulation(), s, 1)
    np.testing.assert_array_equal(ys[0], y1)
    np.testing.assert_array_equal(s1.to_vector(), s2.to_vector())


def test_rollout_rejects_zero_steps():
    with pytest.raises(ValueError):
        cpg_rollout(random_params(np.random.default_rng(0), 2), Modulation(), initial_state(2), 0)


def test_non_finite_state_reports_step():
    rng = np.random.default_rng(0)
    p = random_params(rng, 2)
    s = initial_state(2, rng)
    s.t = 7
    s.b_dot[0] = np.inf
    with pytest.raises(NumericError) as err:
        cpg_step(p, Modulation(), s)
    assert err.value.step == 8


def test_decoupled_identical_oscillators_bit_identical():
    rng = np.random.default_rng(11)
    n = 2
    heads = [np.array([-1.0]), np.array([0.3]), np.full(n, 0.2), np.full(n, 0.7), np.full(n, -0.4)]
    p = unpack_params(heads, n)
    s = initial_state(n)
    s.phi[:] = rng.uniform(0, 2 * np.pi)
    _, ys = cpg_rollout(p, Modulation(), s, 300)
    np.testing.assert_array_equal(ys[:, 0], ys[:, 1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 6))
def test_output_and_smoothness_bounds(seed, n):
    rng = np.random.default_rng(seed)
    mod = Modulation()
    p = random_params(rng, n)
    s = initial_state(n, rng)
    prev_y = s.output()
    for t in range(300):
        bound = step_smoothness_bound(s)
        s, y = cpg_step(p, mod, s)
        assert np.all(np.abs(y) <= np.abs(s.a) + np.abs(s.b) + 1e-12)
        assert np.all(np.abs(y - prev_y) <= 2 * bound + 1e-12)
        prev_y = y
    # steady-state range after amplitude/offset settle
    assert np.all(np.abs(y) <= mod.alpha_A + mod.alpha_B + 1e-6)


def test_state_vector_round_trip():
    rng = np.random.default_rng(2)
    s = initial_state(3, rng, dt=0.02)
    s.a[:] = rng.uniform(size=3)
    v = s.to_vector()
    assert v.shape == (24,)
    q = CpgState.from_vector(v, 3, dt=0.02)
    np.testing.assert_array_equal(q.to_vector(), v)
    with pytest.raises(StructuralError):
        CpgState.from_vector(v[:-1], 3)


@pytest.mark.parametrize("w, locks", [(0.3, True), (0.5, True), (0.8, True), (0.85, False)])
def test_phase_lock_needs_lagged_scheme_stability(w, locks):
    # linearised, the phase difference obeys d(t+1) = d(t) - 2 alpha_w w dt d(t-1): stable only below 1
    mod = Modulation(alpha_A=1.0, alpha_B=0.0)
    dt = 1e-3
    assert (2 * mod.alpha_w * w * dt < 1) == locks
    for seed in range(4):
        rng = np.random.default_rng(seed)
        p = unpack_params([np.array([2 * w - 1]), np.array([rng.uniform(-1, 1)]), np.zeros(2), np.ones(2),
                           np.zeros(2)], 2)
        s = initial_state(2, rng, dt=dt)
        s.a[:] = 1.0
        s, _ = cpg_rollout(p, mod, s, 2000)
        err = abs(wrap(s.phi[1] - s.phi[0] - mod.alpha_phi * p.phi_bias[0, 1]))
        assert (err < 1e-3) == locks
