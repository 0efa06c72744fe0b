"""Small reverse-mode autodiff engine over numpy arrays.

Graphs are built per step (define-by-run). A :class:`Node` wraps an ndarray
value; nodes that do not depend on any trainable leaf are plain constants and
carry no backward closure, so inference-only forward passes cost nothing
extra. ``stop_gradient`` produces such a constant while keeping a reference
to its source node.

Binary operations between two graph nodes require equal shapes, with one
exception: ``(batch, dim) + (dim,)`` bias addition. A node may be combined
with a plain array constant of any shape that broadcasts into the node's
shape.
"""
from __future__ import annotations

import builtins
from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")


class Node:
    """A value in the computation graph.

    Attributes
    ----------
    value : np.ndarray
    parents : tuple of Node
    op : str
        Name of the local gradient rule that produced this node.
    stop : bool
        Set on nodes created by :func:`stop_gradient`; no gradient flows
        through them to ``parents``.
    param : str or None
        Parameter name for trainable leaves.
    """

    __slots__ = ("value", "parents", "op", "stop", "param", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="const", backward=None, *, stop=False, param=None):
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.stop = stop
        self.param = param
        self._backward = backward
        self.requires_grad = param is not None or backward is not None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, stop={self.stop})"

    def numpy(self) -> np.ndarray:
        return self.value

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x))


def _make(value, parents, op, backward) -> Node:
    if not any(p.requires_grad for p in parents):
        return Node(value, op=op)
    return Node(value, parents, op, backward)


def _check_broadcast_into(op, node_shape, const_shape):
    try:
        out = np.broadcast_shapes(node_shape, const_shape)
    except ValueError:
        raise ShapeError(op, node_shape, const_shape) from None
    if out != tuple(node_shape):
        raise ShapeError(op, node_shape, const_shape)


def _binary_shapes(op, a: Node, b: Node, allow_bias=False):
    if a.requires_grad and b.requires_grad:
        if a.shape == b.shape:
            return
        if allow_bias and a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
            return
        raise ShapeError(op, a.shape, b.shape)
    if a.requires_grad:
        _check_broadcast_into(op, a.shape, b.shape)
    elif b.requires_grad:
        _check_broadcast_into(op, b.shape, a.shape)
    elif a.shape != b.shape:
        # constant-only arithmetic: plain numpy broadcasting still must succeed
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(op, a.shape, b.shape) from None


def _unbias(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0)


# elementwise / linear primitives

def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _binary_shapes("add", a, b, allow_bias=True)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), "add",
                 lambda g: (_unbias(g, sa), _unbias(g, sb)))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _binary_shapes("sub", a, b, allow_bias=True)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), "sub",
                 lambda g: (_unbias(g, sa), -_unbias(g, sb)))


def neg(a) -> Node:
    a = _as_node(a)
    return _make(-a.value, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Node:
    """Elementwise product. A constant factor may broadcast (per-row scales)."""
    a, b = _as_node(a), _as_node(b)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value
    ra, rb = a.requires_grad, b.requires_grad
    return _make(av * bv, (a, b), "mul",
                 lambda g: (g * bv if ra else None, g * av if rb else None))


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    ra, rb = a.requires_grad, b.requires_grad
    return _make(av @ bv, (a, b), "matmul",
                 lambda g: (g @ bv.T if ra else None, av.T @ g if rb else None))


def affine(x, w, b) -> Node:
    """Fused ``x @ w + b`` with ``b`` broadcast over rows."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("affine", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("affine", w.shape, b.shape)
    xv, wv = x.value, w.value
    out = xv @ wv
    out += b.value
    rx = x.requires_grad
    return _make(out, (x, w, b), "affine",
                 lambda g: (g @ wv.T if rx else None, xv.T @ g, g.sum(axis=0)))


def silu(x) -> Node:
    x = _as_node(x)
    v = x.value
    s = expit(v)
    return _make(v * s, (x,), "silu", lambda g: (g * (s * (1.0 + v * (1.0 - s))),))


def relu(x) -> Node:
    x = _as_node(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


def sin(x) -> Node:
    x = _as_node(x)
    return _make(np.sin(x.value), (x,), "sin", lambda g: (g * np.cos(x.value),))


def cos(x) -> Node:
    x = _as_node(x)
    return _make(np.cos(x.value), (x,), "cos", lambda g: (-g * np.sin(x.value),))


def sqrt(x) -> Node:
    x = _as_node(x)
    out = np.sqrt(x.value)
    return _make(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def square(x) -> Node:
    x = _as_node(x)
    return _make(x.value * x.value, (x,), "square", lambda g: (2.0 * g * x.value,))


def sq_diff(a, b) -> Node:
    """Elementwise ``(a - b)**2``."""
    a, b = _as_node(a), _as_node(b)
    _binary_shapes("sq_diff", a, b)
    d = a.value - b.value
    return _make(d * d, (a, b), "sq_diff", lambda g: (2.0 * g * d, -2.0 * g * d))


def concat(parts: Iterable, axis: int = -1) -> Node:
    parts = [_as_node(p) for p in parts]
    axis = axis % parts[0].value.ndim
    for p in parts[1:]:
        if p.value.ndim != parts[0].value.ndim or any(
            p.shape[k] != parts[0].shape[k] for k in range(p.value.ndim) if k != axis
        ):
            raise ShapeError("concat", parts[0].shape, p.shape)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    value = np.concatenate([p.value for p in parts], axis=axis)
    return _make(value, parts, "concat", lambda g: tuple(np.split(g, sizes, axis=axis)))


def sum(x, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    x = _as_node(x)
    shape = x.shape
    if axis is None:
        out = np.asarray(x.value.sum(dtype=np.float64), dtype=x.dtype)
        return _make(out, (x,), "sum", lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))
    out = x.value.sum(axis=axis)
    return _make(out, (x,), "sum",
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).astype(x.dtype),))


def mean(x) -> Node:
    """Mean over all elements, accumulated in float64."""
    x = _as_node(x)
    n = x.value.size
    shape = x.shape
    out = np.asarray(x.value.mean(dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), "mean", lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def stop_gradient(x) -> Node:
    """Return a node with the same value that blocks gradient flow to ``x``."""
    x = _as_node(x)
    node = Node(x.value, (x,), "stop", stop=True)
    node.requires_grad = False
    return node


def _toposort(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.stop or not node.requires_grad:
            continue
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def grad(loss: Node, params: "ParamStore | None" = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every parameter leaf.

    Parameters behind a stop-gradient receive no contribution through that
    path. When ``params`` is given, its parameters that got no gradient at all
    are reported as zeros.
    """
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ValueError(f"grad: loss must be scalar, got shape {loss.shape}")
    out: dict[str, np.ndarray] = {}
    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.param is not None:
                if node.param in out:
                    out[node.param] = out[node.param] + g
                else:
                    out[node.param] = g
                continue
            if node._backward is None:
                continue
            for p, pg in zip(node.parents, node._backward(g)):
                if not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
    if params is not None:
        for name, value in params.items():
            out.setdefault(name, np.zeros_like(value))
    return out


class ParamStore:
    """Ordered trainable parameters with matching gradient accumulators."""

    def __init__(self, values: Mapping[str, np.ndarray] | None = None):
        self._values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._grads: dict[str, np.ndarray] = {}
        for name, v in (values or {}).items():
            self.add(name, v)

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, copy=True)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        if name not in self._values:
            raise KeyError(name)
        value = np.asarray(value)
        if value.shape != self._values[name].shape:
            raise ShapeError("param-assign", self._values[name].shape, value.shape)
        self._values[name] = value

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def __iter__(self):
        return iter(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def num_parameters(self) -> int:
        return int(builtins.sum(v.size for v in self._values.values()))

    def leaves(self) -> dict[str, Node]:
        """Fresh trainable leaf nodes for one forward pass."""
        return {k: Node(v, param=k) for k, v in self._values.items()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return self._grads

    def zero_grad(self):
        for g in self._grads.values():
            g[...] = 0

    def accumulate(self, grads: Mapping[str, np.ndarray]):
        for k, g in grads.items():
            self._grads[k] += g

    def copy(self, dtype=None) -> "ParamStore":
        return ParamStore({k: (v.astype(dtype) if dtype else v) for k, v in self._values.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._values.values()])



def check_gradients(f: Callable[[Node], Node], x, h: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a node to a scalar node. Both routes are evaluated in float64.
    The error per coordinate is ``|a - d| / max(|a|, |d|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    leaf = Node(x, param="x")
    y = f(leaf)
    if not np.all(np.isfinite(y.value)):
        raise FloatingPointError("check_gradients: f(x) is not finite")
    analytic = grad(y).get("x", np.zeros_like(x))
    numeric = np.zeros_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(Node(x)).value)
        flat[i] = old - h
        fm = float(f(Node(x)).value)
        flat[i] = old
        nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_param_gradients(loss_fn: Callable[[Mapping[str, Node]], Node], params: ParamStore,
                          h: float = 1e-3, max_coords: int | None = None, rng=None) -> float:
    """Like :func:`check_gradients` but over every coordinate of a ParamStore.

    ``loss_fn`` receives a mapping ``name -> Node`` and must build the loss
    from it. Parameters are promoted to float64 for both routes. With
    ``max_coords`` a random subset of coordinates is probed per parameter.
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss = loss_fn({k: Node(v, param=k) for k, v in p64.items()})
    if not np.all(np.isfinite(loss.value)):
        raise FloatingPointError("check_param_gradients: loss is not finite")
    analytic = grad(loss)
    worst = 0.0
    consts = {k: Node(v) for k, v in p64.items()}
    for name, v in p64.items():
        a = analytic.get(name, np.zeros_like(v)).reshape(-1)
        flat = v.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = float(loss_fn(consts).value)
            flat[i] = old - h
            fm = float(loss_fn(consts).value)
            flat[i] = old
            d = (fp - fm) / (2 * h)
            err = abs(a[i] - d) / max(abs(a[i]), abs(d), 1e-8)
            worst = max(worst, err)
    return float(worst)
