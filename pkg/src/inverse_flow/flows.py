"""Time grids and conditional probability paths."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 0.002
DEFAULT_RHO = 7.0
DEFAULT_N = 11


@dataclass(frozen=True)
class TimeGrid:
    """Karras-style grid ``eps = t_1 < ... < t_N = T``."""

    epsilon: float
    horizon: float
    rho: float
    values: np.ndarray

    @property
    def count(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.size

    def __getitem__(self, i):
        return self.values[i]

    def weights(self) -> np.ndarray:
        """Consistency-loss weights ``t_{i+1} - t_i``."""
        return np.diff(self.values)


def make_time_grid(eps: float = DEFAULT_EPS, T: float = 1.0, rho: float = DEFAULT_RHO,
                   N: int = DEFAULT_N) -> TimeGrid:
    if not 0 < eps < T:
        raise ValueError(f"need 0 < eps < T, got eps={eps}, T={T}")
    if rho < 1:
        raise ValueError(f"need rho >= 1, got {rho}")
    if int(N) != N or N < 2:
        raise ValueError(f"need integer N >= 2, got {N}")
    N = int(N)
    i = np.arange(N, dtype=np.float64)
    lo, hi = eps ** (1.0 / rho), T ** (1.0 / rho)
    t = (lo + i / (N - 1) * (hi - lo)) ** rho
    # pin endpoints against rounding in the power
    t[0], t[-1] = eps, T
    if np.any(np.diff(t) <= 0):
        raise ValueError("time grid is not strictly increasing (N too large for float64?)")
    return TimeGrid(float(eps), float(T), float(rho), t)


def _check_shapes(a, b, what):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _time_column(t, x):
    if x.dtype == object:
        t = np.asarray(t, dtype=object)
    else:
        t = np.asarray(t, dtype=x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    if t.ndim == 1 and x.ndim > 1:
        t = t.reshape((-1,) + (1,) * (x.ndim - 1))
    return t


class LinearPath:
    """``x_t = x0 + t (x1 - x0)`` with constant velocity ``x1 - x0``.

    Other interpolations can be plugged into the trainers by implementing the
    same three methods.
    """

    name = "linear"

    def sample(self, x0, x1, t):
        x0, x1 = _check_shapes(x0, x1, "sample_conditional")
        return x0 + _time_column(t, x0) * (x1 - x0)

    def velocity(self, x0, x1, t=None):
        x0, x1 = _check_shapes(x0, x1, "conditional_vector_field")
        return x1 - x0

    def __repr__(self):
        return "LinearPath()"


LINEAR = LinearPath()


def sample_conditional(x0, x1, t):
    return LINEAR.sample(x0, x1, t)


def conditional_vector_field(x0, x1):
    return LINEAR.velocity(x0, x1)


def backward_step(x_next, u, dt):
    """One reverse Euler step ``x_next - u * dt``."""
    dt_arr = np.asarray(dt)
    if not np.all(dt_arr > 0):
        raise ValueError("backward_step: dt must be positive")
    x_next = np.asarray(x_next)
    return x_next - _time_column(dt_arr, x_next) * np.asarray(u)


PATHS = {"linear": LINEAR}
