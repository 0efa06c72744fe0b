import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inverse_flow.flows import make_time_grid
from inverse_flow.solvers import (
    CFLError, NumericalError, VelocityField, euler_maruyama, grid_coords, jacobi_diffusion, jacobi_drift,
    ns_simulate, random_stream_field, shear_vortex_field, solve_ode_backward, spectral_divergence,
    stream_field,
)

GRID = make_time_grid()


def test_zero_field_is_frozen(rng):
    x1 = rng.standard_normal((5, 2))
    np.testing.assert_array_equal(solve_ode_backward(lambda x, t: np.zeros_like(x), x1, GRID), x1)


def test_constant_field_exact_euler(rng):
    x1 = rng.standard_normal((5, 2))
    out = solve_ode_backward(lambda x, t: np.tile([1.0, 0.0], (len(x), 1)), x1, GRID)
    np.testing.assert_allclose(out, x1 - np.array([1.0, 0.0]) * (1 - 0.002), atol=1e-15)


@given(st.integers(2, 60), st.floats(1.0, 9.0), st.integers(0, 1000))
def test_true_conditional_field_recovers_eps_point(n, rho, seed):
    r = np.random.default_rng(seed)
    x0, x1 = r.standard_normal((4, 3)), r.standard_normal((4, 3))
    g = make_time_grid(0.002, 1.0, rho, n)
    out = solve_ode_backward(lambda x, t: x1 - x0, x1, g)
    # Euler on a constant field is exact: the endpoint is the path at t = eps
    np.testing.assert_allclose(out, x0 + 0.002 * (x1 - x0), rtol=0, atol=1e-12)


def test_return_path_and_nfe():
    calls = []

    def v(x, t):
        calls.append(t)
        return np.zeros_like(x)

    _, path = solve_ode_backward(v, np.zeros((1, 1)), GRID, return_path=True)
    assert len(calls) == len(GRID) - 1 == 10
    assert len(path) == len(GRID)
    assert calls[0] == 1.0


def test_non_finite_state_names_step():
    with pytest.raises(NumericalError) as info:
        solve_ode_backward(lambda x, t: np.full_like(x, np.inf), np.zeros((1, 1)), GRID)
    assert info.value.step == 0


def test_em_zero_diffusion_matches_euler_bitwise():
    drift = lambda x, t: -0.7 * x + np.sin(t)
    x0 = np.linspace(-1, 1, 7)
    em = euler_maruyama(drift, lambda x, t: 0.0, x0, 1.3, 50, rng=4)
    x, dt = x0.copy(), 1.3 / 50
    for k in range(50):
        x = x + drift(x, k * dt) * dt + 0.0 * math.sqrt(dt) * 0.0
    assert em.tobytes() == x.tobytes()


def test_em_brownian_variance():
    n = 100_000
    out = euler_maruyama(lambda x, t: 0.0, lambda x, t: 1.0, np.zeros(n), 1.0, 20, rng=0)
    assert abs(out.var(ddof=1) - 1.0) <= 3 * math.sqrt(2 / (n - 1))


def test_em_seed_determinism():
    args = (jacobi_drift(2, 1, 3), jacobi_diffusion(2), np.full(50, 0.4), 1.0, 30)
    a = euler_maruyama(*args, rng=np.random.default_rng(5), clamp=(0, 1))
    b = euler_maruyama(*args, rng=np.random.default_rng(5), clamp=(0, 1))
    assert a.tobytes() == b.tobytes()


def test_jacobi_coefficients_at_symmetric_point():
    assert jacobi_drift(1, 1, 1)(0.5, 0.0) == 0.0
    assert jacobi_diffusion(1)(0.5, 0.0) == 0.5


def test_ns_rest_state():
    v0 = VelocityField(np.zeros((16, 16)), np.zeros((16, 16)))
    out = ns_simulate(v0)
    assert np.all(out.vx == 0) and np.all(out.vy == 0)


def test_ns_single_mode_shear_decays_exactly():
    M, nu, t_end = 64, 1e-3, 0.1
    X, Y = grid_coords(M)
    v0 = VelocityField(np.sin(2 * np.pi * Y), np.zeros((M, M)), nu=nu)
    out = ns_simulate(v0, nu, 1e-3, t_end)
    expected = math.exp(-nu * (2 * np.pi) ** 2 * t_end)
    amp = float(np.sum(out.vx * np.sin(2 * np.pi * Y)) / np.sum(np.sin(2 * np.pi * Y) ** 2))
    assert amp == pytest.approx(expected, rel=1e-3)
    assert np.max(np.abs(out.vy)) < 1e-12


def test_ns_example_field_loses_energy():
    v0 = shear_vortex_field(64)
    out = ns_simulate(v0, 1e-3, 1e-3, 0.1)
    assert out.energy().sum() < v0.energy().sum()


@given(st.integers(0, 10_000), st.floats(-1, 1), st.floats(-1, 1))
def test_ns_conserves_mean_and_dissipates(seed, ux, uy):
    v0 = random_stream_field(seed, n_modes=4, M=16, amp_max=0.05, nu=5e-3)
    v0 = VelocityField(v0.vx + ux, v0.vy + uy, nu=v0.nu)
    out = ns_simulate(v0, dt=2e-3, t_end=0.02)
    assert out.vx.mean() == pytest.approx(v0.vx.mean(), abs=1e-12)
    assert out.vy.mean() == pytest.approx(v0.vy.mean(), abs=1e-12)
    # kinetic energy of the fluctuation cannot grow
    e0 = np.sum((v0.vx - ux) ** 2 + (v0.vy - uy) ** 2)
    e1 = np.sum((out.vx - out.vx.mean()) ** 2 + (out.vy - out.vy.mean()) ** 2)
    assert e1 <= e0 * (1 + 1e-9)


def test_ns_rejects_cfl_violation():
    v0 = shear_vortex_field(64, amp_x=100.0)
    with pytest.raises(CFLError, match="CFL"):
        ns_simulate(v0, dt=1e-2, t_end=0.1)


def test_ns_batch_matches_single():
    a, b = shear_vortex_field(16, 1.0, 0.5), shear_vortex_field(16, 0.3, 1.2, 0.1, 0.2)
    both = VelocityField(np.stack([a.vx, b.vx]), np.stack([a.vy, b.vy]))
    out = ns_simulate(both, 1e-3, 2e-3, 0.02)
    single = ns_simulate(b, 1e-3, 2e-3, 0.02)
    np.testing.assert_allclose(out.vx[1], single.vx, atol=1e-12)


def test_random_stream_is_divergence_free():
    # spectral derivatives are only exact for periodic fields, so this also checks the wavenumber snapping
    v = random_stream_field(np.random.default_rng(3))
    div = spectral_divergence(v)
    scale = np.sqrt(np.mean(v.vx ** 2 + v.vy ** 2)) * 2 * np.pi * 64
    assert np.max(np.abs(div)) <= 1e-6 * scale


def test_single_mode_stream_field_analytic():
    M = 32
    v = stream_field([1.0], [2 * np.pi], [2 * np.pi], M)
    X, Y = grid_coords(M)
    np.testing.assert_allclose(v.vx, -2 * np.pi * np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y), atol=1e-12)


def test_random_stream_seeds_differ():
    a, b = random_stream_field(1, M=32), random_stream_field(2, M=32)
    assert np.sum((a.vx - b.vx) ** 2) > 0


def test_flat_roundtrip(rng):
    v = random_stream_field(rng, M=16)
    back = VelocityField.from_flat(v.flat(), 16)
    np.testing.assert_array_equal(back.vx, v.vx)
    np.testing.assert_array_equal(back.vy, v.vy)
