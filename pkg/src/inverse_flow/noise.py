"""Conditional noise processes p(x1 | x0) and a Poisson-Gaussian noise-model fitter."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import ClassVar

import numpy as np
from scipy import optimize, signal

from .rng import as_generator
from .solvers import VelocityField, euler_maruyama, jacobi_diffusion, jacobi_drift, ns_simulate


class DomainError(ValueError):
    """Input outside the support of a noise process."""

    def __init__(self, message: str, index=None):
        self.index = index
        super().__init__(message if index is None else f"{message} at index {index}")


def _check_positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise ValueError(f"{k} must be positive, got {v}")


def _check_nonneg(**kw):
    for k, v in kw.items():
        if not v >= 0:
            raise ValueError(f"{k} must be non-negative, got {v}")


def _first_bad(mask: np.ndarray):
    idx = np.argwhere(mask)[0]
    return tuple(int(i) for i in idx)


class NoiseProcess:
    """Base class. Subclasses are frozen dataclasses with a ``kind`` tag.

    ``domain`` is ``(lo, hi)`` for the support of ``x0`` (``None`` entries are
    unbounded). ``project`` clips model outputs into that support before they
    are fed back into ``sample``.
    """

    kind: ClassVar[str] = ""
    domain: ClassVar[tuple] = (None, None)

    def sample(self, x0, rng=None) -> np.ndarray:
        raise NotImplementedError

    def project(self, x) -> np.ndarray:
        lo, hi = self.domain
        if lo is None and hi is None:
            return np.asarray(x)
        return np.clip(x, lo, hi)

    def check_domain(self, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=np.float64)
        if not np.all(np.isfinite(x0)):
            raise DomainError(f"{self.kind}: non-finite input", _first_bad(~np.isfinite(x0)))
        lo, hi = self.domain
        if lo is not None and np.any(x0 < lo):
            raise DomainError(f"{self.kind}: input below {lo}", _first_bad(x0 < lo))
        if hi is not None and np.any(x0 > hi):
            raise DomainError(f"{self.kind}: input above {hi}", _first_bad(x0 > hi))
        return x0

    def to_config(self, prefix: str = "noise.") -> dict[str, object]:
        out: dict[str, object] = {f"{prefix}kind": self.kind}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, NoiseProcess):
                out.update(v.to_config(f"{prefix}{f.name}."))
            elif v is not None:
                out[f"{prefix}{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out


@dataclass(frozen=True)
class AdditiveGaussian(NoiseProcess):
    sigma: float = 1.0
    kind: ClassVar[str] = "gaussian"

    def __post_init__(self):
        _check_nonneg(sigma=self.sigma)

    def sample(self, x0, rng=None):
        x0 = self.check_domain(x0)
        if self.sigma == 0:
            return x0.copy()
        return x0 + self.sigma * as_generator(rng).standard_normal(x0.shape)


def correlated_kernel(a: float, radius: int) -> np.ndarray:
    """``g(r) = cos|r| exp(-r^2 / 2a^2) / (2 pi a^2)`` on a ``(2 radius + 1)^2`` grid."""
    _check_positive(a=a)
    radius = int(radius)
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    off = np.arange(-radius, radius + 1, dtype=np.float64)
    r2 = off[:, None] ** 2 + off[None, :] ** 2
    return np.cos(np.sqrt(r2)) * np.exp(-r2 / (2 * a * a)) / (2 * np.pi * a * a)


@dataclass(frozen=True)
class CorrelatedGaussian(NoiseProcess):
    """White noise convolved with ``correlated_kernel``.

    The kernel is rescaled to unit L2 norm so the marginal standard deviation
    away from the borders is ``sigma``. Convolution runs over the last two axes,
    or over ``image_shape`` when the trailing axis is a flattened image.
    """

    sigma: float = 1.0
    a: float = 2.0
    radius: int | None = None
    image_shape: tuple[int, int] | None = None
    kind: ClassVar[str] = "correlated"

    def __post_init__(self):
        _check_nonneg(sigma=self.sigma)
        _check_positive(a=self.a)
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    @property
    def kernel_radius(self) -> int:
        return self.radius if self.radius is not None else max(1, math.ceil(3 * self.a))

    def kernel(self) -> np.ndarray:
        g = correlated_kernel(self.a, self.kernel_radius)
        return g / np.sqrt(np.sum(g * g))

    def sample(self, x0, rng=None):
        x0 = self.check_domain(x0)
        if self.sigma == 0:
            return x0.copy()
        shape = x0.shape
        img = x0.reshape(shape[:-1] + self.image_shape) if self.image_shape else x0
        if img.ndim < 2:
            raise ValueError("correlated noise needs at least 2-D input or image_shape")
        nu = self.sigma * as_generator(rng).standard_normal(img.shape)
        k = self.kernel().reshape((1,) * (img.ndim - 2) + self.kernel().shape)
        eta = signal.fftconvolve(nu, k, mode="same", axes=(-2, -1))
        return (img + eta).reshape(shape)


@dataclass(frozen=True)
class Jacobi(NoiseProcess):
    """Wright-Fisher diffusion on [0, 1] run for ``t_end`` by Euler-Maruyama."""

    s: float = 1.0
    a: float = 1.0
    b: float = 1.0
    steps: int = 100
    t_end: float = 1.0
    delta: float = 1e-5
    kind: ClassVar[str] = "jacobi"
    domain: ClassVar[tuple] = (0.0, 1.0)

    def __post_init__(self):
        _check_positive(s=self.s, a=self.a, b=self.b, steps=self.steps, t_end=self.t_end)

    def sample(self, x0, rng=None):
        x0 = self.check_domain(x0)
        return euler_maruyama(jacobi_drift(self.s, self.a, self.b), jacobi_diffusion(self.s), x0,
                              self.t_end, int(self.steps), as_generator(rng),
                              clamp=(self.delta, 1.0 - self.delta))

    def stationary_mean(self) -> float:
        return self.a / (self.a + self.b)

    def mean_at(self, m0, t):
        """Exact mean of the diffusion started at ``m0``."""
        m = self.stationary_mean()
        return m + (np.asarray(m0) - m) * np.exp(-0.5 * self.s * (self.a + self.b) * t)


@dataclass(frozen=True)
class Poisson(NoiseProcess):
    """``zeta * Poisson(x0 / zeta)``."""

    zeta: float = 0.01
    kind: ClassVar[str] = "poisson"
    domain: ClassVar[tuple] = (0.0, None)

    def __post_init__(self):
        _check_positive(zeta=self.zeta)

    def sample(self, x0, rng=None):
        x0 = self.check_domain(x0)
        return self.zeta * as_generator(rng).poisson(x0 / self.zeta).astype(np.float64)


@dataclass(frozen=True)
class Gamma(NoiseProcess):
    """``x0 * Gamma(k, 1/k)``: unit-mean multiplicative noise."""

    k: float = 100.0
    kind: ClassVar[str] = "gamma"
    domain: ClassVar[tuple] = (0.0, None)

    def __post_init__(self):
        _check_positive(k=self.k)

    def sample(self, x0, rng=None):
        x0 = self.check_domain(x0)
        return x0 * as_generator(rng).gamma(self.k, 1.0 / self.k, x0.shape)


@dataclass(frozen=True)
class Rayleigh(NoiseProcess):
    """``x0 * Rayleigh(sigma_r)``; ``mean_correct`` divides by the Rayleigh mean."""

    sigma_r: float = 0.3
    mean_correct: bool = False
    kind: ClassVar[str] = "rayleigh"
    domain: ClassVar[tuple] = (0.0, None)

    def __post_init__(self):
        _check_positive(sigma_r=self.sigma_r)

    def sample(self, x0, rng=None):
        x0 = self.check_domain(x0)
        out = x0 * as_generator(rng).rayleigh(self.sigma_r, x0.shape)
        if self.mean_correct:
            out /= self.sigma_r * math.sqrt(math.pi / 2)
        return out


@dataclass(frozen=True)
class PoissonGaussian(NoiseProcess):
    """Heteroscedastic Gaussian with variance ``f^(2 gamma) sigma_u^2 + sigma_w^2``.

    Negative signal values are clipped to zero inside the variance term.
    """

    gamma: float = 0.5
    sigma_u: float = 1.0
    sigma_w: float = 1.0
    kind: ClassVar[str] = "poisson_gaussian"

    def __post_init__(self):
        _check_nonneg(gamma=self.gamma, sigma_u=self.sigma_u, sigma_w=self.sigma_w)

    def variance(self, f):
        return np.maximum(f, 0.0) ** (2 * self.gamma) * self.sigma_u ** 2 + self.sigma_w ** 2

    def sample(self, x0, rng=None):
        x0 = self.check_domain(x0)
        return x0 + np.sqrt(self.variance(x0)) * as_generator(rng).standard_normal(x0.shape)


@dataclass(frozen=True)
class Compound(NoiseProcess):
    """A multiplicative process followed by additive Gaussian noise."""

    base: NoiseProcess = field(default_factory=Poisson)
    sigma: float = 10.0
    kind: ClassVar[str] = "compound"

    def __post_init__(self):
        _check_nonneg(sigma=self.sigma)
        if isinstance(self.base, Compound):
            raise ValueError("compound base cannot itself be compound")

    @property
    def domain(self):
        return self.base.domain

    def sample(self, x0, rng=None):
        rng = as_generator(rng)
        x = self.base.sample(x0, rng)
        return x + self.sigma * rng.standard_normal(x.shape)


@dataclass(frozen=True)
class NavierStokes(NoiseProcess):
    """Deterministic forward map: flattened velocity fields advanced by ``t_end``.

    ``x0`` rows are ``VelocityField.flat()`` vectors on an ``M x M`` grid. The
    step is the smaller of ``dt`` and the CFL-limited step for the batch.
    """

    M: int = 64
    nu: float = 1e-3
    t_end: float = 0.1
    dt: float = 1e-3
    cfl: float = 0.45
    kind: ClassVar[str] = "navier_stokes"

    def __post_init__(self):
        _check_positive(M=self.M, nu=self.nu, t_end=self.t_end, dt=self.dt, cfl=self.cfl)

    def sample(self, x0, rng=None):
        x0 = self.check_domain(x0)
        field0 = VelocityField.from_flat(x0, self.M, nu=self.nu)
        vmax = float(np.max(np.sqrt(field0.vx ** 2 + field0.vy ** 2)))
        dt = min(self.dt, self.cfl / (max(vmax, 1e-12) * self.M))
        return ns_simulate(field0, self.nu, dt, self.t_end).flat()


NOISE_KINDS = {c.kind: c for c in (AdditiveGaussian, CorrelatedGaussian, Jacobi, Poisson, Gamma,
                                    Rayleigh, PoissonGaussian, Compound, NavierStokes)}


def _coerce(value: str, ftype: str):
    ftype = str(ftype)
    if "bool" in ftype:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if "tuple" in ftype:
        return tuple(int(v) for v in value.split(","))
    if "int" in ftype and "float" not in ftype:
        return int(value)
    return float(value)


def noise_from_config(cfg, prefix: str = "noise.") -> NoiseProcess:
    """Build a process from flat ``noise.kind=...``, ``noise.<field>=...`` entries."""
    kind = cfg.get(f"{prefix}kind")
    if kind is None:
        raise KeyError(f"{prefix}kind")
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; choose from {sorted(NOISE_KINDS)}")
    cls = NOISE_KINDS[kind]
    known = {f.name: f for f in fields(cls)}
    for key in cfg:
        if key.startswith(prefix) and key != f"{prefix}kind":
            name = key[len(prefix):].split(".", 1)[0]
            if name not in known:
                raise KeyError(key)
    kw = {}
    for name, f in known.items():
        if name == "base":
            if f"{prefix}base.kind" in cfg:
                kw["base"] = noise_from_config(cfg, f"{prefix}base.")
            continue
        key = f"{prefix}{name}"
        if key in cfg:
            v = cfg[key]
            kw[name] = _coerce(v, f.type) if isinstance(v, str) else v
    return cls(**kw)


def sample_noise(proc: NoiseProcess, x0, rng=None) -> np.ndarray:
    return proc.sample(x0, rng)


# Poisson-Gaussian fitting

PATCH = 4
GAMMA_GRID = np.round(np.arange(0.0, 1.5 + 1e-9, 0.05), 10)


@dataclass
class NoiseFit:
    gamma: float
    sigma_u: float
    sigma_w: float
    log_likelihood: float
    n_patches: int = 0

    def as_process(self) -> PoissonGaussian:
        return PoissonGaussian(self.gamma, self.sigma_u, self.sigma_w)

    def to_dict(self) -> dict:
        return asdict(self)


def patch_statistics(image, patch: int = PATCH):
    """Means and within-patch sums of squares over non-overlapping patches."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    H, W = (img.shape[0] // patch) * patch, (img.shape[1] // patch) * patch
    blocks = img[:H, :W].reshape(H // patch, patch, W // patch, patch).swapaxes(1, 2)
    blocks = blocks.reshape(-1, patch * patch)
    mean = blocks.mean(axis=1)
    ss = np.sum((blocks - mean[:, None]) ** 2, axis=1)
    return mean, ss


def _nll(v, ss, dof):
    return float(np.sum(0.5 * dof * np.log(v) + ss / (2.0 * v)))


def _fit_scales(basis, ss, dof, iters: int = 30):
    """Non-negative ``(su2, sw2)`` maximizing the patch likelihood at fixed gamma.

    Iteratively reweighted least squares on the unbiased patch variances; the
    weights ``1/v`` are the Fisher scoring weights of the scaled chi-square.
    """
    s2 = ss / dof
    A = np.stack([basis, np.ones_like(basis)], axis=1)
    floor = max(1e-12, 1e-12 * float(np.mean(s2)))
    coef, _ = optimize.nnls(A, s2)
    for _ in range(iters):
        v = np.maximum(A @ coef, floor)
        w = 1.0 / v
        new, _ = optimize.nnls(A * w[:, None], s2 * w)
        if np.allclose(new, coef, rtol=1e-10, atol=1e-14):
            coef = new
            break
        coef = new
    return coef


def fit_poisson_gaussian(image, patch: int = PATCH, refine: bool = True) -> NoiseFit:
    """Maximum-likelihood ``(gamma, sigma_u, sigma_w)`` from 4x4 patch statistics.

    Each patch contributes its mean ``f`` and sum of squares ``SS``; under the
    model ``SS / v`` is chi-square with ``patch^2 - 1`` degrees of freedom,
    ``v = f^(2 gamma) sigma_u^2 + sigma_w^2``. A grid over ``gamma`` with
    reweighted non-negative least squares for the two scales is followed by a
    bounded quasi-Newton refinement of all three parameters.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2 * patch:
        raise ValueError(f"image must be 2-D and at least {2 * patch}x{2 * patch}, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    f, ss = patch_statistics(img, patch)
    if not np.any(ss > 0):
        raise ValueError("degenerate variance: every patch is constant")
    dof = patch * patch - 1
    fpos = np.maximum(f, 0.0)
    scale = float(np.mean(ss / dof))
    ss_n = ss / scale
    # avoid 0**0 ambiguity and log(0) for dark patches
    fpos = np.where(fpos > 0, fpos, 0.0)

    def basis(gamma):
        return np.where(fpos > 0, fpos ** (2 * gamma), 1.0 if gamma == 0 else 0.0)

    best = None
    for g in GAMMA_GRID:
        su2, sw2 = _fit_scales(basis(g), ss_n, dof)
        v = su2 * basis(g) + sw2
        if np.any(v <= 0):
            continue
        nll = _nll(v, ss_n, dof)
        if best is None or nll < best[0]:
            best = (nll, g, su2, sw2)
    if best is None:
        raise ValueError("degenerate variance: no admissible fit")
    nll, g, su2, sw2 = best

    if refine:
        fmax = max(float(fpos.max()), 1.0)
        # scale the multiplicative coefficient so it is O(1) at the brightest patch
        def unpack(p):
            gam = p[0]
            return gam, p[1] / fmax ** (2 * gam), p[2]

        def obj(p):
            gam, a, b = unpack(p)
            v = a * basis(gam) + b
            if np.any(v <= 0):
                return 1e300
            return _nll(v, ss_n, dof)

        x0 = np.array([g, su2 * fmax ** (2 * g), sw2])
        res = optimize.minimize(obj, x0, method="L-BFGS-B",
                                bounds=[(0.0, 1.5), (0.0, None), (1e-12, None)])
        if res.fun <= nll:
            nll = float(res.fun)
            g, su2, sw2 = unpack(res.x)

    if g == 0.0:
        # both terms are constant at gamma = 0; report it all as additive
        su2, sw2 = 0.0, su2 + sw2
    # undo the normalization: likelihood of the raw SS differs by a constant
    su2, sw2 = su2 * scale, sw2 * scale
    v = su2 * basis(g) + sw2
    loglik = -_nll(v, ss, dof)
    return NoiseFit(float(g), float(np.sqrt(su2)), float(np.sqrt(sw2)), loglik, int(f.size))
