"""Metrics and Gaussian-mixture oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .rng import as_generator

PSNR_CAP = 200.0


def psnr(a, b, max_val: float = 255.0) -> float:
    """``10 log10(max_val^2 / MSE)``, capped at 200 dB for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if not max_val > 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val * max_val / mse))


def _mean_pairwise(X, Y, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, X.shape[0], chunk):
        total += float(cdist(X[i:i + chunk], Y).sum())
    return total / (X.shape[0] * Y.shape[0])


def energy_distance(X, Y) -> float:
    """``2 E|X - Y| - E|X - X'| - E|Y - Y'|`` over all pairs (V-statistic, so >= 0)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 1 and X.shape[1] > 1 and Y.shape[1] == 1:
        X = X.T
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch {X.shape} vs {Y.shape}")
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise ValueError("need at least 2 samples on each side")
    ed = 2 * _mean_pairwise(X, Y) - _mean_pairwise(X, X) - _mean_pairwise(Y, Y)
    return max(ed, 0.0)


def nn_accuracy(points, labels) -> float:
    """Leave-one-out nearest-neighbour label accuracy."""
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ValueError("need at least 2 points")
    if labels is None or len(labels) != P.shape[0]:
        raise ValueError("labels must be given, one per point")
    labels = np.asarray(labels)
    _, idx = cKDTree(P).query(P, k=2)
    self_first = idx[:, 0] == np.arange(P.shape[0])
    nn = np.where(self_first, idx[:, 1], idx[:, 0])
    return float(np.mean(labels[nn] == labels))


@dataclass
class MixtureSpec:
    """Isotropic Gaussian mixture ``sum_k w_k N(center_k, tau^2 I)``."""

    centers: np.ndarray
    tau: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        m = self.centers.shape[0]
        w = np.full(m, 1.0 / m) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (m,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative, one per center, summing to 1")
        self.weights = w

    def sample(self, n: int, rng=None) -> np.ndarray:
        rng = as_generator(rng)
        k = rng.choice(len(self.weights), n, p=self.weights)
        return self.centers[k] + self.tau * rng.standard_normal((n, self.centers.shape[1]))


def _responsibilities(x, spec: MixtureSpec, sigma_total: float):
    s2 = spec.tau ** 2 + sigma_total ** 2
    d2 = np.sum((x[:, None, :] - spec.centers[None, :, :]) ** 2, axis=-1)
    logits = np.log(np.maximum(spec.weights, 1e-300))[None, :] - d2 / (2 * s2)
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def _as_rows(x, d):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    return (x.reshape(1, d) if single else x), single


def gm_posterior_mean(x, spec: MixtureSpec, sigma_total: float) -> np.ndarray:
    """``E[x0 | x]`` for ``x = x0 + N(0, sigma_total^2 I)`` and mixture prior ``x0``."""
    if not sigma_total > 0:
        raise ValueError("sigma_total must be positive")
    xs, single = _as_rows(x, spec.centers.shape[1])
    r = _responsibilities(xs, spec, sigma_total)
    shrink = spec.tau ** 2 / (spec.tau ** 2 + sigma_total ** 2)
    means = spec.centers[None, :, :] + shrink * (xs[:, None, :] - spec.centers[None, :, :])
    out = np.einsum("nk,nkd->nd", r, means)
    return out[0] if single else out


def gm_posterior_sample(x, spec: MixtureSpec, sigma_total: float, n: int, rng=None) -> np.ndarray:
    """``n`` draws of ``x0 | x`` for a single query point ``x``; shape ``(n, d)``."""
    rng = as_generator(rng)
    xs, _ = _as_rows(x, spec.centers.shape[1])
    r = _responsibilities(xs, spec, sigma_total)[0]
    k = rng.choice(len(r), n, p=r / r.sum())
    s2 = spec.tau ** 2 + sigma_total ** 2
    shrink = spec.tau ** 2 / s2
    mu = spec.centers[k] + shrink * (xs - spec.centers[k])
    sd = spec.tau * sigma_total / math.sqrt(s2)
    return mu + sd * rng.standard_normal(mu.shape)


def gm_marginal_field(x, t: float, spec: MixtureSpec, sigma: float) -> np.ndarray:
    """Marginal velocity of the path ``x_t = x0 + t sigma z`` at time ``t > 0``."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=np.float64)
    return (x - gm_posterior_mean(x, spec, t * sigma)) / t


def gaussian_toy_field(x, t, tau: float = 1.0, sigma: float = 0.5):
    """Marginal velocity for ``x0 ~ N(0, tau^2)`` on the path ``x0 + t sigma z``.

    ``t`` is a scalar or one time per row of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and x.ndim == 2:
        t = t[:, None]
    return x * t * sigma ** 2 / (tau ** 2 + t ** 2 * sigma ** 2)


def nearest_center_distance(points, centers) -> np.ndarray:
    d = cdist(np.asarray(points, dtype=np.float64), np.asarray(centers, dtype=np.float64))
    return d.min(axis=1)


def cluster_stats(points, labels, n_clusters: int):
    """Per-cluster means and pooled per-cluster standard deviations."""
    P = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    means = np.zeros((n_clusters, P.shape[1]))
    stds = np.zeros(n_clusters)
    for k in range(n_clusters):
        sel = P[labels == k]
        means[k] = sel.mean(axis=0)
        stds[k] = float(np.sqrt(np.mean(np.var(sel, axis=0))))
    return means, stds


def relative_l1(pred, target) -> float:
    """``sum |pred - target| / sum |target|``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.sum(np.abs(pred - target)) / np.sum(np.abs(target)))
