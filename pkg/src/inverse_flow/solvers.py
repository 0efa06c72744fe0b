"""ODE/SDE integrators and a periodic 2-D spectral Navier-Stokes solver."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .flows import TimeGrid
from .rng import as_generator


class NumericalError(FloatingPointError):
    """Non-finite state encountered during integration."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


def _field_fn(net):
    return net if callable(net) else net.__call__


def solve_ode_backward(net, x1, grid: TimeGrid, return_path: bool = False):
    """Explicit Euler from ``t = 1`` down the reversed grid to ``t = eps``.

    ``net`` is a VectorFieldNet or any callable ``v(x, t)``. Uses
    ``len(grid) - 1`` field evaluations.
    """
    if len(grid) < 2:
        raise ValueError("grid needs at least 2 points")
    v = _field_fn(net)
    t = grid.values
    x = np.array(x1, copy=True)
    path = [x.copy()] if return_path else None
    for k, j in enumerate(range(len(t) - 1, 0, -1)):
        dt = t[j] - t[j - 1]
        step = np.asarray(dt, dtype=x.dtype) if np.issubdtype(x.dtype, np.floating) else dt
        x = x - v(x, t[j]) * step
        if not np.all(np.isfinite(x)):
            raise NumericalError("ODE state became non-finite", k)
        if return_path:
            path.append(x.copy())
    return (x, path) if return_path else x


def euler_maruyama(drift: Callable, diffusion: Callable, x0, t_end: float, steps: int, rng=None,
                   t0: float = 0.0, clamp: tuple[float, float] | None = None):
    """``x += f(x, t) dt + g(x, t) sqrt(dt) z`` with ``z ~ N(0, I)``.

    With ``clamp=(lo, hi)`` the state is clipped after every step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = as_generator(rng)
    x = np.array(x0, dtype=np.float64, copy=True)
    dt = (t_end - t0) / steps
    sq = math.sqrt(dt)
    for k in range(steps):
        t = t0 + k * dt
        z = rng.standard_normal(x.shape)
        x = x + drift(x, t) * dt + diffusion(x, t) * sq * z
        if clamp is not None:
            np.clip(x, clamp[0], clamp[1], out=x)
        if not np.all(np.isfinite(x)):
            raise NumericalError("SDE state became non-finite", k)
    return x


def jacobi_drift(s=1.0, a=1.0, b=1.0):
    return lambda x, t: 0.5 * s * (a * (1.0 - x) - b * x)


def jacobi_diffusion(s=1.0):
    return lambda x, t: np.sqrt(np.maximum(s * x * (1.0 - x), 0.0))


# Navier-Stokes

@dataclass
class VelocityField:
    """Velocity on the periodic unit square; arrays indexed ``[..., ix, iy]``."""

    vx: np.ndarray
    vy: np.ndarray
    t: float = 0.0
    nu: float = 1e-3

    def __post_init__(self):
        self.vx = np.asarray(self.vx, dtype=np.float64)
        self.vy = np.asarray(self.vy, dtype=np.float64)
        if self.vx.shape != self.vy.shape or self.vx.shape[-1] != self.vx.shape[-2]:
            raise ValueError(f"velocity components must be square and equal: {self.vx.shape}, {self.vy.shape}")
        _check_pow2(self.vx.shape[-1])

    @property
    def M(self) -> int:
        return self.vx.shape[-1]

    def stack(self) -> np.ndarray:
        """``(..., 2, M, M)`` array."""
        return np.stack([self.vx, self.vy], axis=-3)

    def flat(self) -> np.ndarray:
        s = self.stack()
        return s.reshape(s.shape[:-3] + (-1,))

    @classmethod
    def from_flat(cls, flat, M: int, **kw) -> "VelocityField":
        flat = np.asarray(flat)
        a = flat.reshape(flat.shape[:-1] + (2, M, M))
        return cls(a[..., 0, :, :], a[..., 1, :, :], **kw)

    def energy(self) -> np.ndarray:
        return 0.5 * np.mean(self.vx ** 2 + self.vy ** 2, axis=(-2, -1))


def _check_pow2(M):
    if M < 2 or M & (M - 1):
        raise ValueError(f"grid size must be a power of two, got {M}")


def grid_coords(M: int):
    x = np.arange(M) / M
    return np.meshgrid(x, x, indexing="ij")


def _wavenumbers(M: int):
    k = 2 * np.pi * np.fft.fftfreq(M, d=1.0 / M)
    kr = 2 * np.pi * np.fft.rfftfreq(M, d=1.0 / M)
    kx, ky = np.meshgrid(k, kr, indexing="ij")
    return kx, ky


def spectral_divergence(field: VelocityField) -> np.ndarray:
    kx, ky = _wavenumbers(field.M)
    d = 1j * kx * np.fft.rfft2(field.vx) + 1j * ky * np.fft.rfft2(field.vy)
    return np.fft.irfft2(d, s=(field.M, field.M))


class CFLError(ValueError):
    pass


def ns_simulate(v0: VelocityField, nu: float | None = None, dt: float = 1e-3, t_end: float = 0.1,
                dealias: bool = True) -> VelocityField:
    """Integrate incompressible Navier-Stokes in vorticity form.

    Pseudo-spectral on the periodic unit square, 2/3-rule dealiasing of the
    advection term, exact integrating factor for viscosity and classical RK4
    for advection. The mean velocity is carried separately and conserved.
    Leading batch dimensions in ``v0`` are simulated independently.
    """
    nu = v0.nu if nu is None else nu
    M = v0.M
    if t_end <= 0 or dt <= 0:
        raise ValueError("dt and t_end must be positive")
    if nu < 0:
        raise ValueError("viscosity must be non-negative")
    if dt * nu * (np.pi * M) ** 2 >= 1:
        raise ValueError(f"diffusive step bound violated: dt*nu*(pi*M)^2 = {dt * nu * (np.pi * M) ** 2:.3g} >= 1")
    n_steps = max(1, int(math.ceil(t_end / dt - 1e-9)))
    h = t_end / n_steps
    vmax = float(np.max(np.sqrt(v0.vx ** 2 + v0.vy ** 2)))
    if vmax * h * M > 0.5:
        raise CFLError(f"CFL violated: max|v|*dt*M = {vmax * h * M:.3g} > 0.5; use dt <= {0.5 / (vmax * M):.3g}")

    kx, ky = _wavenumbers(M)
    k2 = kx ** 2 + ky ** 2
    k2_inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    kmax = np.pi * M
    keep = (np.abs(kx) < (2.0 / 3.0) * kmax) & (np.abs(ky) < (2.0 / 3.0) * kmax)
    mask = keep.astype(float) if dealias else np.ones_like(k2)
    s = (M, M)
    ux = np.mean(v0.vx, axis=(-2, -1), keepdims=True)
    uy = np.mean(v0.vy, axis=(-2, -1), keepdims=True)

    def velocity(wh):
        psi = wh * k2_inv
        return np.fft.irfft2(1j * ky * psi, s=s) + ux, np.fft.irfft2(-1j * kx * psi, s=s) + uy

    def rhs(wh):
        vx, vy = velocity(wh)
        wx = np.fft.irfft2(1j * kx * wh, s=s)
        wy = np.fft.irfft2(1j * ky * wh, s=s)
        return -mask * np.fft.rfft2(vx * wx + vy * wy)

    wh = 1j * kx * np.fft.rfft2(v0.vy) - 1j * ky * np.fft.rfft2(v0.vx)
    E = np.exp(-nu * k2 * h)
    E2 = np.exp(-nu * k2 * h / 2)
    for step in range(n_steps):
        k1 = rhs(wh)
        k2_ = rhs(E2 * (wh + 0.5 * h * k1))
        k3 = rhs(E2 * wh + 0.5 * h * k2_)
        k4 = rhs(E * wh + h * E2 * k3)
        wh = E * wh + (h / 6.0) * (E * k1 + 2.0 * E2 * (k2_ + k3) + k4)
        if not np.all(np.isfinite(wh)):
            raise NumericalError("Navier-Stokes state became non-finite", step)
    vx, vy = velocity(wh)
    return VelocityField(vx, vy, t=v0.t + t_end, nu=nu)


def stream_field(amplitudes, kx, ky, M: int, nu: float = 1e-3) -> VelocityField:
    """Velocity of ``psi = sum A sin(kx x) cos(ky y)``, differentiated analytically."""
    _check_pow2(M)
    X, Y = grid_coords(M)
    A = np.asarray(amplitudes, float)[:, None, None]
    KX = np.asarray(kx, float)[:, None, None]
    KY = np.asarray(ky, float)[:, None, None]
    vx = -np.sum(A * KY * np.sin(KX * X) * np.sin(KY * Y), axis=0)
    vy = -np.sum(A * KX * np.cos(KX * X) * np.cos(KY * Y), axis=0)
    return VelocityField(vx, vy, nu=nu)


def random_stream_field(rng=None, n_modes: int = 20, M: int = 64, amp_max: float = 2.0,
                        k_max: float = 10.0, nu: float = 1e-3) -> VelocityField:
    """Random stream-function field; wavenumbers snapped to multiples of 2 pi.

    ``A ~ U[0, amp_max]`` and raw ``k ~ U[0, k_max]``; each raw wavenumber is
    rounded to the nearest integer multiple of ``2 pi`` so the field is
    periodic on the unit square.
    """
    rng = as_generator(rng)
    A = rng.uniform(0.0, amp_max, n_modes)
    kx = rng.uniform(0.0, k_max, n_modes)
    ky = rng.uniform(0.0, k_max, n_modes)
    snap = lambda k: 2 * np.pi * np.round(k / (2 * np.pi))
    return stream_field(A, snap(kx), snap(ky), M, nu=nu)


def shear_vortex_field(M: int = 64, amp_x: float = 1.0, amp_y: float = 1.0, shift_x: float = 0.0,
                       shift_y: float = 0.0, nu: float = 1e-3) -> VelocityField:
    """``vx = -amp_x sin(2 pi (y + shift_y))``, ``vy = amp_y sin(4 pi (x + shift_x))``."""
    X, Y = grid_coords(M)
    vx = -amp_x * np.sin(2 * np.pi * (Y + shift_y))
    vy = amp_y * np.sin(4 * np.pi * (X + shift_x))
    return VelocityField(vx, vy, nu=nu)
