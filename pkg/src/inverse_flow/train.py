"""Training loops for inverse flow matching, inverse consistency and generalized
consistency training, with an AdamW optimizer.
"""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore
from .flows import LINEAR, TimeGrid, backward_step, make_time_grid
from .nets import ConsistencyNet, VectorFieldNet
from .noise import AdditiveGaussian, CorrelatedGaussian, NoiseProcess
from .rng import substream
from .solvers import NumericalError, solve_ode_backward
from .tensorio import format_value, write_kv

LOSS_KINDS = ("l2", "pseudo_huber")
VARIANTS = ("v1", "v2")


class TrainingError(NumericalError):
    """Non-finite loss or state during training, with epoch/step context."""

    def __init__(self, message: str, epoch: int, step: int):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})", step)


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 5e-4
    lr_schedule: str = "constant"  # or "step": halve once at lr_halve_epoch
    lr_halve_epoch: int | None = None
    batch_size: int = 256
    loss: str = "l2"
    huber_delta: float = 1.0
    eps: float = 0.002
    horizon: float = 1.0
    rho: float = 7.0
    n_grid: int = 11
    ode_n: int | None = None
    variant: str = "v2"
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    embed_dim: int = 256
    embed_scale: float = 1.0
    activation: str = "silu"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps_per_epoch: int | None = None
    ema_decay: float = 0.0  # 0 disables; else the returned weights are the moving average

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if int(self.epochs) < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    def grid(self) -> TimeGrid:
        return make_time_grid(self.eps, self.horizon, self.rho, self.n_grid)

    def ode_grid(self) -> TimeGrid:
        return make_time_grid(self.eps, self.horizon, self.rho, self.ode_n or self.n_grid)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "step":
            h = self.lr_halve_epoch if self.lr_halve_epoch is not None else self.epochs // 2
            if epoch >= h:
                return self.lr * 0.5
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise KeyError(k)
            kw[k] = _coerce(v, known[k].type) if isinstance(v, str) else v
        return cls(**kw)


def _coerce(v: str, ftype):
    ftype = str(ftype)
    if "tuple" in ftype:
        return tuple(int(x) for x in v.split(",") if x.strip())
    if v.strip().lower() in ("none", "") and "None" in ftype:
        return None
    if ftype.startswith("int"):
        return int(v)
    if ftype.startswith("float"):
        return float(v)
    return v


# optimizer

@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(state: AdamWState, params: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> None:
    """Adam with bias correction and decoupled weight decay; updates ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in params.names():
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise dc.ShapeError("adamw", p.shape, g.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * state.weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# losses

def consistency_loss(out_next: Node, out_prev: Node, weight, kind: str = "l2", delta: float = 1.0) -> Node:
    """Weighted batch mean of the distance between two consistency outputs.

    ``weight`` is a scalar or per-row array. ``l2`` is the squared Euclidean
    distance; ``pseudo_huber`` is ``delta * (sqrt(|r|^2 + delta^2) - delta)``,
    which tends to ``|r|^2 / 2`` as ``delta`` grows.
    """
    out_next, out_prev = dc.constant(out_next), dc.constant(out_prev)
    if out_next.shape != out_prev.shape:
        raise dc.ShapeError("consistency_loss", out_next.shape, out_prev.shape)
    dtype = out_next.dtype
    d = dc.sq_diff(out_next, out_prev)
    if d.value.ndim > 1:
        d = dc.sum(d, axis=tuple(range(1, d.value.ndim)))
    if kind == "pseudo_huber":
        d = dc.add(d, np.asarray(delta * delta, dtype))
        d = dc.mul(dc.sub(dc.sqrt(d), np.asarray(delta, dtype)), np.asarray(delta, dtype))
    elif kind != "l2":
        raise ValueError(f"unknown loss kind {kind!r}")
    w = np.asarray(weight, dtype=dtype)
    if w.ndim == 0:
        return dc.mul(dc.mean(d), w)
    return dc.mean(dc.mul(d, w.reshape(d.shape)))


def flow_matching_loss(pred: Node, target) -> Node:
    """Batch mean of the squared Euclidean error."""
    d = dc.sq_diff(pred, dc.constant(np.asarray(target, dtype=pred.dtype)))
    return dc.mean(dc.sum(d, axis=1))


# per-step sample construction

@dataclass
class FlowBatch:
    """Inputs and regression target for one flow-matching step."""

    x_t: np.ndarray
    t: np.ndarray
    u: np.ndarray
    x0: np.ndarray
    x1: np.ndarray


@dataclass
class ConsistencyBatch:
    """An adjacent pair on the conditional path for one consistency step."""

    x_next: np.ndarray
    t_next: np.ndarray
    x_prev: np.ndarray
    t_prev: np.ndarray
    weight: np.ndarray
    x0: np.ndarray
    x1: np.ndarray

    def states(self):
        return (self.x0, self.x1, self.x_next, self.x_prev)


def _gaussian_path(proc: NoiseProcess):
    if not isinstance(proc, (AdditiveGaussian, CorrelatedGaussian)):
        raise ValueError(f"variant v1 needs an additive Gaussian process, got {proc.kind!r}")


def _endpoint(proc: NoiseProcess, x0, rng, variant: str, dtype):
    """Draw the far end of the conditional path and its constant velocity."""
    if variant == "v1":
        # conditional on x0 only: x_t = x0 + t * eta with eta the additive noise
        _gaussian_path(proc)
        eta = proc.sample(np.zeros_like(x0, dtype=np.float64), rng)
        return (x0 + eta).astype(dtype)
    return np.asarray(proc.sample(x0, rng), dtype=dtype)


def make_flow_batch(x0, proc: NoiseProcess, grid: TimeGrid, rng, variant: str = "v2", path=LINEAR) -> FlowBatch:
    """``t ~ U[eps, 1]``, ``x1' ~ p(.|x0)``, point ``x_t`` and velocity on the path."""
    x0 = np.asarray(x0)
    dtype = x0.dtype if np.issubdtype(x0.dtype, np.floating) else np.float32
    x1 = _endpoint(proc, x0, rng, variant, dtype)
    t = rng.uniform(grid.epsilon, grid.horizon, x0.shape[0]).astype(dtype)
    return FlowBatch(path.sample(x0, x1, t).astype(dtype), t, path.velocity(x0, x1, t).astype(dtype), x0, x1)


def make_consistency_batch(x0, proc: NoiseProcess, grid: TimeGrid, rng, variant: str = "v2",
                           path=LINEAR) -> ConsistencyBatch:
    """``i ~ U{1..N-1}``; ``x_{t_{i+1}}`` on the path, ``x_{t_i}`` by one backward step."""
    x0 = np.asarray(x0)
    dtype = x0.dtype if np.issubdtype(x0.dtype, np.floating) else np.float32
    x1 = _endpoint(proc, x0, rng, variant, dtype)
    n = x0.shape[0]
    i = rng.integers(0, len(grid) - 1, n)
    t_prev, t_next = grid.values[i], grid.values[i + 1]
    x_next = path.sample(x0, x1, t_next.astype(dtype)).astype(dtype)
    u = path.velocity(x0, x1, t_next)
    x_prev = backward_step(x_next, u, (t_next - t_prev).astype(dtype)).astype(dtype)
    weight = (t_next - t_prev).astype(dtype)
    return ConsistencyBatch(x_next, t_next.astype(dtype), x_prev, t_prev.astype(dtype), weight, x0, x1)


def consistency_step_loss(net: ConsistencyNet, params: Mapping[str, Node], b: ConsistencyBatch,
                          kind: str = "l2", delta: float = 1.0, target: np.ndarray | None = None) -> Node:
    """``w * d(c(x_next, t_next), stopgrad(c(x_prev, t_prev)))``.

    A precomputed ``target`` replaces the stopped branch (used by finite
    difference checks, where the target must stay fixed).
    """
    out_next = net.forward(b.x_next, b.t_next, params)
    if target is None:
        out_prev = dc.stop_gradient(net.forward(b.x_prev, b.t_prev, params))
    else:
        out_prev = dc.constant(np.asarray(target, dtype=out_next.dtype))
    return consistency_loss(out_next, out_prev, b.weight, kind, delta)


def flow_step_loss(net: VectorFieldNet, params: Mapping[str, Node], b: FlowBatch) -> Node:
    return flow_matching_loss(net.forward(b.x_t, b.t, params), b.u)


# reports

@dataclass
class TrainReport:
    method: str
    losses: list = field(default_factory=list)
    wall_clock: float = 0.0
    seed: int = 0
    config: dict = field(default_factory=dict)
    checkpoint: str | None = None
    steps: int = 0
    state_min: float = math.inf
    state_max: float = -math.inf

    def observe(self, *arrays):
        for a in arrays:
            self.state_min = min(self.state_min, float(np.min(a)))
            self.state_max = max(self.state_max, float(np.max(a)))

    def summary(self) -> dict:
        out = {"method": self.method, "epochs": len(self.losses), "steps": self.steps,
               "final_loss": self.losses[-1] if self.losses else float("nan"),
               "wall_clock_s": round(self.wall_clock, 3), "seed": self.seed,
               "state_min": self.state_min, "state_max": self.state_max}
        if self.checkpoint:
            out["checkpoint"] = self.checkpoint
        for k, v in self.config.items():
            out[f"config.{k}"] = v
        return out

    def write_losses(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss"])
            for i, loss in enumerate(self.losses, 1):
                w.writerow([i, format_value(float(loss))])

    def write(self, directory, stem: str = "train") -> tuple[str, str]:
        """Write ``<stem>_loss.csv`` (epoch,loss) and ``<stem>_summary.txt``."""
        os.makedirs(directory, exist_ok=True)
        csv_path = os.path.join(directory, f"{stem}_loss.csv")
        self.write_losses(csv_path)
        kv_path = os.path.join(directory, f"{stem}_summary.txt")
        write_kv(kv_path, self.summary())
        return csv_path, kv_path


# training loops

def _build(kind, data_dim: int, cfg: TrainConfig):
    cls = ConsistencyNet if kind == "cf" else VectorFieldNet
    return cls(data_dim, cfg.hidden, cfg.embed_dim, cfg.embed_scale, seed=cfg.seed, activation=cfg.activation)


def _loop(method: str, data, cfg: TrainConfig, net, step_loss: Callable, callback=None):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"training data must be (n, d), got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("training data contains non-finite values")
    n = data.shape[0]
    rng = substream(cfg.seed, "train", method)
    opt = AdamWState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    report = TrainReport(method, seed=cfg.seed, config=cfg.to_dict())
    bs = min(int(cfg.batch_size), n)
    decay = np.float32(cfg.ema_decay)
    shadow = {k: v.copy() for k, v in net.params.items()} if decay > 0 else None
    start = time.perf_counter()
    for epoch in range(int(cfg.epochs)):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        batches = [perm[k:k + bs] for k in range(0, n, bs)]
        if cfg.max_steps_per_epoch is not None:
            batches = batches[:int(cfg.max_steps_per_epoch)]
        total, count = 0.0, 0
        for s, idx in enumerate(batches):
            try:
                loss = step_loss(data[idx], rng, report)
            except FloatingPointError as e:
                raise TrainingError(str(e), epoch + 1, s) from e
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError("non-finite loss", epoch + 1, s)
            grads = dc.grad(loss, net.params)
            try:
                adamw_step(opt, net.params, grads, lr)
            except FloatingPointError as e:
                raise TrainingError(str(e), epoch + 1, s) from e
            if shadow is not None:
                for k, avg in shadow.items():
                    avg *= decay
                    avg += (np.float32(1) - decay) * net.params[k]
            total += value * len(idx)
            count += len(idx)
            report.steps += 1
        report.losses.append(total / count)
        if callback is not None:
            callback(epoch, report.losses[-1])
    report.wall_clock = time.perf_counter() - start
    if shadow is not None:
        for k, avg in shadow.items():
            net.params[k] = avg
    return net, report


def _recovered(proc: NoiseProcess, x0):
    if not np.all(np.isfinite(x0)):
        raise FloatingPointError("recovered x0 is not finite")
    return np.asarray(proc.project(x0), dtype=np.float32)


def train_ifm(data_x1, proc: NoiseProcess, cfg: TrainConfig | None = None, net: VectorFieldNet | None = None,
              callback=None):
    """Inverse flow matching.

    Each step: ``x0 = ODE_{1->0}(x1)`` with the current field (outside the
    graph, so no gradient flows through it), projected into the process
    domain; ``x1' ~ p(.|x0)``; ``t ~ U[eps, 1]``; regress ``v(x_t, t)`` onto
    the conditional velocity.
    """
    cfg = cfg or TrainConfig()
    data_x1 = np.asarray(data_x1, dtype=np.float32)
    net = net or _build("vf", data_x1.shape[1], cfg)
    grid, ode_grid = cfg.grid(), cfg.ode_grid()

    def step(x1, rng, report):
        x0 = _recovered(proc, solve_ode_backward(net, x1, ode_grid))
        b = make_flow_batch(x0, proc, grid, rng, cfg.variant)
        report.observe(b.x0, b.x1, b.x_t)
        return flow_step_loss(net, net.params.leaves(), b)

    return _loop("ifm", data_x1, cfg, net, step, callback)


def _train_consistency(method, data, proc, cfg, net, callback, x0_from_model: bool):
    cfg = cfg or TrainConfig()
    data = np.asarray(data, dtype=np.float32)
    net = net or _build("cf", data.shape[1], cfg)
    grid = cfg.grid()

    def step(x, rng, report):
        if x0_from_model:
            x0 = _recovered(proc, dc.stop_gradient(net.forward(x, 1.0, dict(net.params.items()))).value)
        else:
            x0 = x
        b = make_consistency_batch(x0, proc, grid, rng, cfg.variant)
        report.observe(*b.states())
        return consistency_step_loss(net, net.params.leaves(), b, cfg.loss, cfg.huber_delta)

    return _loop(method, data, cfg, net, step, callback)


def train_icm(data_x1, proc: NoiseProcess, cfg: TrainConfig | None = None, net: ConsistencyNet | None = None,
              callback=None):
    """Inverse consistency training: ``x0 = stopgrad(c(x1, 1))`` replaces clean data."""
    return _train_consistency("icm", data_x1, proc, cfg, net, callback, x0_from_model=True)


def train_gct(data_x0, proc: NoiseProcess, cfg: TrainConfig | None = None, net: ConsistencyNet | None = None,
              callback=None):
    """Generalized consistency training on clean data ``x0`` with forward process ``proc``."""
    return _train_consistency("gct", data_x0, proc, cfg, net, callback, x0_from_model=False)


def denoise(net, x1, grid: TimeGrid | None = None) -> np.ndarray:
    """Apply a trained model: one consistency step, or the backward ODE for a field."""
    x1 = np.asarray(x1, dtype=np.float32)
    if isinstance(net, ConsistencyNet):
        return net(x1, 1.0)
    return solve_ode_backward(net, x1, grid or make_time_grid())


# consistency-training vs distillation gradients

def gct_cd_gradients(net: ConsistencyNet, x0, x1, s, grid: TimeGrid, marginal_field: Callable,
                     kind: str = "l2") -> tuple[np.ndarray, np.ndarray]:
    """Flattened parameter gradients of the training and distillation losses.

    Both losses share ``x0``, ``x1`` and the per-row uniform ``s`` that picks
    the grid interval ``i = floor(s (N - 1))``. Training steps back along the
    conditional velocity ``x1 - x0``; distillation steps back along
    ``marginal_field(x, t)``. Evaluated in float64.
    """
    x0 = np.asarray(x0, np.float64)
    x1 = np.asarray(x1, np.float64)
    N = len(grid)
    i = np.minimum((np.asarray(s) * (N - 1)).astype(int), N - 2)
    t_prev, t_next = grid.values[i], grid.values[i + 1]
    dt = t_next - t_prev
    x_next = LINEAR.sample(x0, x1, t_next)
    params = net.params.copy(np.float64)
    out = []
    for u in (x1 - x0, marginal_field(x_next, t_next)):
        x_prev = backward_step(x_next, u, dt)
        b = ConsistencyBatch(x_next, t_next, x_prev, t_prev, dt, x0, x1)
        loss = consistency_step_loss(net, params.leaves(), b, kind)
        g = dc.grad(loss, params)
        out.append(np.concatenate([g[k].ravel() for k in params.names()]))
    return out[0], out[1]


def cosine(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
