import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inverse_flow.evaluate import psnr
from inverse_flow.noise import (
    NOISE_KINDS, AdditiveGaussian, Compound, CorrelatedGaussian, DomainError, Gamma, Jacobi,
    NavierStokes, Poisson, PoissonGaussian, Rayleigh, correlated_kernel, fit_poisson_gaussian,
    noise_from_config, patch_statistics, sample_noise,
)
from inverse_flow.solvers import VelocityField, euler_maruyama, jacobi_diffusion, jacobi_drift, shear_vortex_field


def _block_image(rng, levels=(0.0, 2000.0), blocks=128, patch=4):
    lv = rng.uniform(*levels, (blocks, blocks))
    return np.kron(lv, np.ones((patch, patch)))


def test_gaussian_input_psnr_sigma_25(rng):
    x0 = rng.uniform(0, 255, (512, 512))
    x1 = sample_noise(AdditiveGaussian(25.0), x0, rng)
    assert psnr(x0, x1) == pytest.approx(20.17, abs=0.10)


@pytest.mark.parametrize("proc", [AdditiveGaussian(0.0), CorrelatedGaussian(0.0)])
def test_zero_sigma_is_identity(proc, rng):
    x0 = rng.uniform(0.0, 1.0, (6, 8))
    np.testing.assert_array_equal(proc.sample(x0, rng), x0)


def test_gaussian_moments(rng):
    d = AdditiveGaussian(0.7).sample(np.zeros(100_000), rng)
    n = d.size
    assert abs(d.mean()) <= 3 * 0.7 / math.sqrt(n)
    # sd of the sample variance is sigma^2 sqrt(2 / (n - 1))
    assert abs(d.var(ddof=1) - 0.49) <= 3 * 0.49 * math.sqrt(2 / (n - 1))


@pytest.mark.parametrize("kind", sorted(NOISE_KINDS))
def test_every_branch_is_seed_deterministic(kind):
    proc = NOISE_KINDS[kind]() if kind != "navier_stokes" else NavierStokes(M=16)
    if kind == "navier_stokes":
        x0 = shear_vortex_field(16).flat()[None]
    elif kind == "correlated":
        x0 = np.full((12, 12), 0.5)
    else:
        x0 = np.full((3, 5), 0.5)
    a = proc.sample(x0, np.random.default_rng(9))
    b = proc.sample(x0, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_jacobi_matches_fine_step_reference():
    n = 100_000
    x0 = np.full(n, 0.5)
    coarse = Jacobi(1, 1, 1).sample(x0, np.random.default_rng(1))
    assert coarse.min() >= 0.0 and coarse.max() <= 1.0
    fine = euler_maruyama(jacobi_drift(1, 1, 1), jacobi_diffusion(1), x0, 1.0, 1000,
                          np.random.default_rng(2), clamp=(1e-5, 1 - 1e-5))
    se = math.sqrt(coarse.var() / n + fine.var() / n)
    assert abs(coarse.mean() - fine.mean()) <= 3 * se


def test_jacobi_pulls_toward_stationary_mean(rng):
    proc = Jacobi(s=1, a=1, b=1, t_end=4.0, steps=400)
    out = proc.sample(np.full(20_000, 0.01), rng)
    assert out.mean() > 0.3
    assert out.mean() == pytest.approx(proc.mean_at(0.01, 4.0), abs=0.02)


def test_jacobi_rejects_out_of_domain():
    with pytest.raises(DomainError) as info:
        Jacobi().sample(np.array([0.2, 1.5, 0.3]))
    assert info.value.index == (1,)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.integers(0, 1000))
def test_jacobi_stays_in_unit_interval(x, seed):
    out = Jacobi(s=5.0, a=0.5, b=2.0, steps=50).sample(np.array(x), seed)
    assert np.all((out >= 0) & (out <= 1))


def test_kernel_center_value():
    g = correlated_kernel(2.0, 6)
    assert g[6, 6] == pytest.approx(1 / (8 * math.pi), rel=1e-12)
    assert g[6, 6] == pytest.approx(0.03979, abs=1e-5)


@given(st.floats(0.2, 4.0), st.integers(1, 8))
def test_kernel_radial_symmetry(a, r):
    g = correlated_kernel(a, r)
    np.testing.assert_allclose(g, g[::-1, ::-1], rtol=0, atol=1e-15)
    np.testing.assert_allclose(g, g.T, rtol=0, atol=1e-15)


def _lag1(img):
    z = img - img.mean()
    return float(np.mean(z[:, 1:] * z[:, :-1]) / np.mean(z * z))


def test_correlated_noise_has_lag1_correlation(rng):
    x0 = np.zeros((256, 256))
    white = AdditiveGaussian(1.0).sample(x0, rng)
    corr = CorrelatedGaussian(1.0, a=2.0).sample(x0, rng)[16:-16, 16:-16]
    se = 1 / math.sqrt(white.size)
    assert abs(_lag1(white)) <= 3 * se
    assert _lag1(corr) > 3 * se * 10


def test_correlated_reduces_to_white_for_small_a(rng):
    proc = CorrelatedGaussian(2.0, a=0.05)
    k = proc.kernel()
    assert k[k.shape[0] // 2, k.shape[1] // 2] == pytest.approx(1.0, abs=1e-6)
    x0 = np.zeros((256, 256))
    out = proc.sample(x0, rng)
    assert out.std() == pytest.approx(2.0, rel=0.01)
    assert abs(_lag1(out)) <= 3 / math.sqrt(out.size)


def test_correlated_flattened_image_rows(rng):
    proc = CorrelatedGaussian(1.0, image_shape=(8, 8))
    out = proc.sample(np.zeros((3, 64)), rng)
    assert out.shape == (3, 64)
    with pytest.raises(ValueError):
        CorrelatedGaussian(1.0).sample(np.zeros(16), rng)


def test_multiplicative_branches_are_unit_mean(rng):
    x0 = np.full(200_000, 3.0)
    for proc in (Poisson(0.01), Gamma(100.0)):
        out = proc.sample(x0, rng)
        assert abs(out.mean() - 3.0) <= 3 * out.std() / math.sqrt(out.size)
    r = Rayleigh(0.3, mean_correct=True).sample(x0, rng)
    assert abs(r.mean() - 3.0) <= 3 * r.std() / math.sqrt(r.size)
    with pytest.raises(DomainError):
        Poisson().sample(np.array([-1.0]))


def test_compound_inherits_base_domain(rng):
    proc = Compound(Gamma(50.0), sigma=0.5)
    assert proc.domain == (0.0, None)
    with pytest.raises(ValueError):
        Compound(Compound())


def test_poisson_gaussian_constant_region_variance(rng):
    proc = PoissonGaussian(0.5, 0.4, 1.5)
    f = np.full(200_000, 50.0)
    out = proc.sample(f, rng)
    v = proc.variance(50.0)
    assert v == pytest.approx(50 * 0.16 + 2.25)
    assert abs(out.var(ddof=1) - v) <= 3 * v * math.sqrt(2 / (f.size - 1))


@pytest.mark.parametrize("proc", [
    AdditiveGaussian(0.3), CorrelatedGaussian(2.0, a=1.5, image_shape=(4, 4)), Jacobi(2.0, 1.0, 3.0, steps=20),
    Compound(Poisson(0.05), 3.0), Compound(Rayleigh(0.2, True), 1.0), PoissonGaussian(0.25, 0.5, 1.0),
    NavierStokes(M=32, nu=2e-3),
])
def test_config_roundtrip_through_strings(proc):
    cfg = {k: ",".join(map(str, v)) if isinstance(v, list) else str(v) for k, v in proc.to_config().items()}
    assert noise_from_config(cfg) == proc


def test_config_errors():
    with pytest.raises(KeyError, match="noise.bogus"):
        noise_from_config({"noise.kind": "gaussian", "noise.bogus": "1"})
    with pytest.raises(ValueError, match="unknown noise kind"):
        noise_from_config({"noise.kind": "speckle"})
    with pytest.raises(KeyError):
        noise_from_config({})


def test_navier_stokes_is_deterministic_and_dissipative():
    v0 = shear_vortex_field(32, 1.0, 1.0)
    proc = NavierStokes(M=32)
    out = proc.sample(v0.flat()[None])
    assert out.tobytes() == proc.sample(v0.flat()[None], 123).tobytes()
    end = VelocityField.from_flat(out, 32)
    assert float(end.energy().sum()) < float(v0.energy().sum())


def test_patch_statistics_of_constant_blocks():
    img = np.kron(np.arange(4.0).reshape(2, 2), np.ones((4, 4)))
    f, ss = patch_statistics(img)
    np.testing.assert_array_equal(f, [0, 1, 2, 3])
    np.testing.assert_array_equal(ss, 0)


@pytest.mark.parametrize("truth", [(0.5, 0.1, 2.0), (1.0, 0.05, 1.0), (0.8, 0.2, 3.0)])
def test_fitter_recovers_known_parameters(truth, rng):
    f = _block_image(rng)
    img = PoissonGaussian(*truth).sample(f, rng)
    fit = fit_poisson_gaussian(img)
    assert img.shape == (512, 512)
    for got, want in zip((fit.gamma, fit.sigma_u, fit.sigma_w), truth):
        assert got == pytest.approx(want, rel=0.10)
    assert fit.as_process().gamma == fit.gamma


def test_fitter_on_pure_additive_noise(rng):
    f = _block_image(rng, (0.0, 255.0))
    img = f + 3.0 * rng.standard_normal(f.shape)
    fit = fit_poisson_gaussian(img)
    assert fit.sigma_w == pytest.approx(3.0, rel=0.05)
    contrib = np.mean(np.maximum(f, 0) ** (2 * fit.gamma)) * fit.sigma_u ** 2
    assert contrib <= 0.05 * fit.sigma_w ** 2


def test_fitter_rejects_degenerate_images():
    with pytest.raises(ValueError, match="degenerate"):
        fit_poisson_gaussian(np.full((32, 32), 7.0))
    with pytest.raises(ValueError):
        fit_poisson_gaussian(np.ones(64))
