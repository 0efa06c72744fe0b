"""MLP vector-field and consistency networks with Fourier time embedding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore
from .rng import as_generator
from .tensorio import load_checkpoint, save_checkpoint

ACTIVATIONS = {"silu": dc.silu, "relu": dc.relu}


@dataclass(frozen=True)
class FourierEmbedding:
    """Frozen Gaussian random features ``[sin(2 pi f t), cos(2 pi f t)]``."""

    frequencies: np.ndarray
    embed_scale: float = 1.0

    @classmethod
    def create(cls, embed_dim: int = 256, embed_scale: float = 1.0, rng=None) -> "FourierEmbedding":
        if embed_dim <= 0 or embed_dim % 2:
            raise ValueError(f"embed_dim must be a positive even integer, got {embed_dim}")
        if embed_scale <= 0:
            raise ValueError("embed_scale must be positive")
        rng = as_generator(rng)
        freqs = (rng.standard_normal(embed_dim // 2) * embed_scale).astype(np.float32)
        return cls(freqs, float(embed_scale))

    @property
    def embed_dim(self) -> int:
        return 2 * self.frequencies.size

    def __call__(self, t, n: int | None = None) -> np.ndarray:
        """Embed times ``t`` (scalar or shape ``(n,)``) into an ``(n, embed_dim)`` array."""
        t = np.asarray(t, dtype=np.float32)
        if t.ndim == 0:
            t = np.full(1 if n is None else n, t, dtype=np.float32)
        arg = (2 * np.pi) * t[:, None] * self.frequencies[None, :]
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1).astype(np.float32)


def fourier_embed(t: float, emb: FourierEmbedding) -> np.ndarray:
    return emb(float(t))[0]


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    out_dim: int
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    activation: str = "silu"

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ValueError("MLP needs at least one hidden layer")
        if min((self.in_dim, self.out_dim, *self.hidden)) <= 0:
            raise ValueError(f"all widths must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def init_mlp(spec: MlpSpec, params: ParamStore, prefix: str, rng, zero_last: bool) -> None:
    """Fan-in scaled uniform init; optionally zero the output layer."""
    widths = [spec.in_dim, *spec.hidden, spec.out_dim]
    n_layers = len(widths) - 1
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(a)
        if zero_last and i == n_layers - 1:
            w = np.zeros((a, b), np.float32)
            bias = np.zeros(b, np.float32)
        else:
            w = rng.uniform(-bound, bound, (a, b)).astype(np.float32)
            bias = rng.uniform(-bound, bound, b).astype(np.float32)
        params.add(f"{prefix}{i}.w", w)
        params.add(f"{prefix}{i}.b", bias)


def mlp_forward(spec: MlpSpec, p: Mapping[str, Node], prefix: str, h: Node) -> Node:
    act = ACTIVATIONS[spec.activation]
    n_layers = len(spec.hidden) + 1
    for i in range(n_layers):
        h = dc.affine(h, p[f"{prefix}{i}.w"], p[f"{prefix}{i}.b"])
        if i < n_layers - 1:
            h = act(h)
    return h


class _TimeConditionedNet:
    kind = "base"

    def __init__(self, data_dim: int, hidden: Sequence[int] = (256, 256, 256, 256),
                 embed_dim: int = 256, embed_scale: float = 1.0, seed: int = 0,
                 activation: str = "silu", zero_init_output: bool = True, *, _init: bool = True):
        self.data_dim = int(data_dim)
        self.seed = int(seed)
        self.zero_init_output = zero_init_output
        self.spec = MlpSpec(self.data_dim + embed_dim, self.data_dim, tuple(int(h) for h in hidden), activation)
        rng = np.random.default_rng(self.seed)
        self.embedding = FourierEmbedding.create(embed_dim, embed_scale, rng)
        self.params = ParamStore()
        if _init:
            init_mlp(self.spec, self.params, "mlp.", rng, zero_init_output)

    def _features(self, x, t) -> tuple[Node, np.ndarray]:
        x = dc.constant(x) if not isinstance(x, Node) else x
        if x.value.ndim != 2 or x.shape[1] != self.data_dim:
            raise ValueError(f"{self.kind}: expected input of shape (batch, {self.data_dim}), got {x.shape}")
        n = x.shape[0]
        t = np.asarray(t, dtype=np.float32)
        if t.ndim == 0:
            t = np.full(n, t, dtype=np.float32)
        if t.shape != (n,):
            raise ValueError(f"{self.kind}: time must be scalar or shape ({n},), got {t.shape}")
        return x, t

    def residual(self, x: Node, t: np.ndarray, params: Mapping[str, Node] | None = None) -> Node:
        p = params if params is not None else self.params.leaves()
        h = dc.concat([x, self.embedding(t)], axis=1)
        return mlp_forward(self.spec, p, "mlp.", h)

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "data_dim": self.data_dim,
            "hidden": list(self.spec.hidden),
            "activation": self.spec.activation,
            "embed_dim": self.embedding.embed_dim,
            "embed_scale": self.embedding.embed_scale,
            "seed": self.seed,
            "zero_init_output": int(self.zero_init_output),
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"embed.freq": self.embedding.frequencies}
        out.update(self.params.items())
        return out

    def save(self, path, extra_meta: Mapping[str, object] | None = None) -> None:
        meta = self.metadata()
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.tensors(), meta)


class VectorFieldNet(_TimeConditionedNet):
    """``v(x, t)``: an MLP over ``concat(x, embed(t))``."""

    kind = "vf"

    def forward(self, x, t, params: Mapping[str, Node] | None = None) -> Node:
        x, t = self._features(x, t)
        return self.residual(x, t, params)

    def __call__(self, x, t) -> np.ndarray:
        return self.forward(x, t, dict(self.params.items())).value


class ConsistencyNet(_TimeConditionedNet):
    """``c(x, t) = x + t * F(x, t)``, so ``c(x, 0) == x`` for any parameters."""

    kind = "cf"

    def forward(self, x, t, params: Mapping[str, Node] | None = None) -> Node:
        x, t = self._features(x, t)
        if not np.any(t):
            return x
        f = self.residual(x, t, params)
        return dc.add(x, dc.mul(f, t[:, None]))

    def __call__(self, x, t) -> np.ndarray:
        return self.forward(x, t, dict(self.params.items())).value


def vf_forward(net: VectorFieldNet, x, t) -> np.ndarray:
    return net(x, t)


def cf_forward(net: ConsistencyNet, x, t) -> np.ndarray:
    return net(x, t)


NET_KINDS = {"vf": VectorFieldNet, "cf": ConsistencyNet}


def build_net(kind: str, **kwargs):
    try:
        return NET_KINDS[kind](**kwargs)
    except KeyError:
        raise ValueError(f"unknown network kind {kind!r}") from None


def load_net(path):
    """Rebuild a network from a checkpoint and its ``.meta`` sidecar."""
    tensors, meta = load_checkpoint(path)
    if "kind" not in meta:
        raise ValueError(f"{path}: checkpoint metadata has no 'kind'")
    cls = NET_KINDS[meta["kind"]]
    net = cls(
        data_dim=int(meta["data_dim"]),
        hidden=[int(h) for h in meta["hidden"].split(",")],
        embed_dim=int(meta["embed_dim"]),
        embed_scale=float(meta["embed_scale"]),
        seed=int(meta["seed"]),
        activation=meta.get("activation", "silu"),
        zero_init_output=bool(int(meta.get("zero_init_output", 1))),
        _init=False,
    )
    freq = tensors.pop("embed.freq")
    object.__setattr__(net.embedding, "frequencies", freq)
    for name, value in tensors.items():
        net.params.add(name, value)
    return net, meta
