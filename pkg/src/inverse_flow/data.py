"""Dataset generators, point-set I/O and the tabular (single-cell) preprocessing."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .noise import NavierStokes
from .rng import as_generator
from .solvers import VelocityField, random_stream_field, shear_vortex_field
from .tensorio import load_tensor, save_tensor

_S = math.sqrt(2.0) / 2.0
CENTERS_8 = np.array([
    [0.0, 1.0], [0.0, -1.0], [1.0, 0.0], [-1.0, 0.0],
    [_S, _S], [_S, -_S], [-_S, _S], [-_S, -_S],
])


@dataclass
class LabeledPoints:
    """``(n, d)`` points with optional per-row category labels."""

    points: np.ndarray
    labels: list | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2:
            raise ValueError(f"points must be (n, d), got shape {self.points.shape}")
        if self.labels is not None:
            self.labels = list(self.labels)
            if len(self.labels) != self.points.shape[0]:
                raise ValueError(f"{len(self.labels)} labels for {self.points.shape[0]} points")

    def __len__(self):
        return self.points.shape[0]


def gen_8gaussians(n_train: int = 8000, n_test: int = 1600, sigma: float = 0.15, rng=None,
                   centers=CENTERS_8) -> tuple[LabeledPoints, LabeledPoints]:
    """Uniformly chosen center plus ``N(0, sigma^2 I)``; label is the center index."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    rng = as_generator(rng)
    centers = np.asarray(centers, dtype=np.float64)

    def draw(n):
        lab = rng.integers(0, len(centers), n)
        pts = centers[lab] + sigma * rng.standard_normal((n, centers.shape[1]))
        return LabeledPoints(pts.astype(np.float32), [int(v) for v in lab])

    return draw(n_train), draw(n_test)


def gen_gaussian_toy(n: int, tau: float = 1.0, sigma: float = 0.5, rng=None, dim: int = 1):
    """Clean ``x0 ~ N(0, tau^2)`` and observed ``x1 = x0 + N(0, sigma^2)``."""
    rng = as_generator(rng)
    x0 = tau * rng.standard_normal((n, dim))
    x1 = x0 + sigma * rng.standard_normal((n, dim))
    return x0.astype(np.float32), x1.astype(np.float32)


NS_FAMILIES = ("shear", "stream")


def ns_initial_field(family: str, rng=None, M: int = 64, nu: float = 1e-3, n_modes: int = 20) -> VelocityField:
    """One random initial velocity field.

    ``shear``: ``vx = -a sin(2 pi (y + p))``, ``vy = b sin(4 pi (x + q))`` with
    ``a, b ~ U[0.5, 1.5]`` and phases ``p, q ~ U[0, 1]``.
    ``stream``: ``random_stream_field`` with ``n_modes`` modes.
    """
    rng = as_generator(rng)
    if family == "shear":
        a = rng.uniform(0.5, 1.5, 2)
        p = rng.uniform(0.0, 1.0, 2)
        return shear_vortex_field(M, a[0], a[1], p[0], p[1], nu=nu)
    if family == "stream":
        return random_stream_field(rng, n_modes, M, nu=nu)
    raise ValueError(f"unknown family {family!r}; choose from {NS_FAMILIES}")


def gen_ns_pairs(count: int, family: str = "shear", rng=None, M: int = 64, nu: float = 1e-3,
                 t_end: float = 0.1, dt: float = 1e-3, cfl: float = 0.45, n_modes: int = 20):
    """Flattened ``(initial, final)`` velocity fields, each of shape ``(count, 2 M^2)``.

    Each field is advanced on its own, with the step chosen by ``NavierStokes``.
    """
    rng = as_generator(rng)
    proc = NavierStokes(M=M, nu=nu, t_end=t_end, dt=dt, cfl=cfl)
    x0 = np.stack([ns_initial_field(family, rng, M, nu, n_modes).flat() for _ in range(count)])
    x1 = np.stack([proc.sample(row[None])[0] for row in x0])
    return x0.astype(np.float32), x1.astype(np.float32)


# PCA

class PCA(NamedTuple):
    components: np.ndarray
    projected: np.ndarray
    explained_variance: np.ndarray


def pca_project(matrix, k: int, max_iter: int = 20000, tol: float = 1e-12, rng=None) -> PCA:
    """Top-``k`` principal directions by power iteration with deflation.

    Each direction is iterated on the sample covariance of the centered data,
    re-orthogonalized against the directions already found, then deflated.
    """
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {X.shape}")
    n, d = X.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k must be in [1, min(n, d)] = [1, {min(n, d)}], got {k}")
    rng = as_generator(0 if rng is None else rng)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / max(n - 1, 1)
    comps = np.zeros((k, d))
    var = np.zeros(k)
    for j in range(k):
        v = rng.standard_normal(d)
        basis = comps[:j]
        for _ in range(max_iter):
            v = v - basis.T @ (basis @ v)
            w = C @ v
            w = w - basis.T @ (basis @ w)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                # remaining variance is zero: any orthogonal unit vector will do
                w = v
                norm = np.linalg.norm(w)
            w /= norm
            done = 1.0 - abs(float(w @ v) / max(np.linalg.norm(v), 1e-300)) < tol
            v = w
            if done:
                break
        lam = float(v @ C @ v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps[j], var[j] = v, lam
        C = C - lam * np.outer(v, v)
    order = np.argsort(-var, kind="stable")
    comps, var = comps[order], var[order]
    return PCA(comps, Xc @ comps.T, var)


def sc_normalize(embedding, n_components: int = 6) -> np.ndarray:
    """Keep the first ``n_components`` columns, scaled so column 0 has unit std."""
    E = np.asarray(embedding, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] < 1:
        raise ValueError(f"embedding must be (n, k) with k >= 1, got {E.shape}")
    sd = float(np.std(E[:, 0]))
    if not sd > 0:
        raise ValueError("first component has zero variance")
    return E[:, :min(E.shape[1], n_components)] / sd


# I/O

def label_path(path) -> str:
    return str(path) + ".labels.csv"


def save_points(path, lp: LabeledPoints) -> None:
    """Tensor record for the points; labels (if any) in a ``index,label`` CSV sidecar."""
    save_tensor(path, lp.points)
    side = label_path(path)
    if lp.labels is None:
        if os.path.exists(side):
            os.remove(side)
        return
    with open(side, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["index", "label"])
        for i, lab in enumerate(lp.labels):
            w.writerow([i, lab])


def load_points(path) -> LabeledPoints:
    pts = load_tensor(path)
    if pts.ndim == 1:
        pts = pts[:, None]
    side = label_path(path)
    labels = None
    if os.path.exists(side):
        with open(side, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows or [c.strip() for c in rows[0]] != ["index", "label"]:
            raise ValueError(f"{side}: expected header 'index,label'")
        labels = [None] * (len(rows) - 1)
        for r in rows[1:]:
            labels[int(r[0])] = _parse_label(r[1])
    return LabeledPoints(pts, labels)


def _parse_label(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def load_csv_matrix(path) -> tuple[np.ndarray, list[str]]:
    """Numeric CSV with a header row; returns ``(matrix, header)``."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = rows[0]
    body = [r for r in rows[1:] if r]
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as e:
        raise ValueError(f"{path}: non-numeric value ({e})") from None
    if data.ndim != 2 or (data.size and data.shape[1] != len(header)):
        raise ValueError(f"{path}: ragged rows or header/width mismatch")
    return data, header


def save_csv_matrix(path, matrix, header: Sequence[str] | None = None) -> None:
    m = np.asarray(matrix)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(list(header) if header else [f"c{j}" for j in range(m.shape[1])])
        for row in m:
            w.writerow([repr(float(v)) for v in row])
