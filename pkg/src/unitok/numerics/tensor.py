"""Dense tensors with reverse-mode automatic differentiation.

Every primitive builds an output ``Tensor`` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. ``backward``
walks the graph in reverse topological order and accumulates into leaves.
"""
from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self.op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params=params)

    # -- operator sugar ------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward result as a graph node.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class ComputeGraph:
    """Topologically ordered nodes reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def index(self) -> dict[int, int]:
        return {id(n): i for i, n in enumerate(self.nodes)}


def backward(root: Tensor, graph: ComputeGraph | None = None, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf.

    Intermediate gradients are dropped as soon as they are consumed. Parameters
    listed in ``params`` that the root does not depend on get a zero gradient
    and a warning.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if graph is None:
        graph = ComputeGraph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    reached: set[int] = set()
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                reached.add(id(node))
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if params is not None:
        for p in params:
            if p.requires_grad and id(p) not in reached:
                warnings.warn(f"parameter of shape {p.shape} is disconnected from the loss; gradient set to zero")
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    p = np.asarray(exponent, dtype=a.dtype)
    return make_op(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return make_op(out, (a,), lambda g: (g * _sigmoid(-x),), "logsigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(a.data * s, (a,), lambda g: (g * (s * (1 + a.data * (1 - s))),), "silu")


def relu(a: Tensor) -> Tensor:
    return make_op(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),), "relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant (no gradient there)."""
    mask = np.broadcast_to(mask, a.shape)
    return make_op(
        np.where(mask, np.asarray(value, dtype=a.dtype), a.data),
        (a,),
        lambda g: (np.where(mask, 0, g).astype(g.dtype, copy=False),),
        "masked_fill",
    )


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.shape, dtype=np.float32) >= rate).astype(a.dtype) / np.asarray(1.0 - rate, dtype=a.dtype)
    return make_op(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return make_op(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axis, keepdims),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size // max(np.asarray(out).size, 1)
    scale = np.asarray(1.0 / n, dtype=a.dtype)
    return make_op(np.asarray(out), (a,), lambda g: (_expand(g * scale, a.shape, axis, keepdims),), "mean")


def max_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; ties send the gradient to the first maximiser."""
    if axis is None:
        flat = reshape(a, (-1,))
        return max_(flat, 0, keepdims=False)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis)
        return (full,)

    return make_op(out if keepdims else np.squeeze(out, axis), (a,), bw, "max")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    z = a.data - m
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# linear algebra and indexing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), bw, "matmul")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]``; gradient scatter-adds into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make_op(weight.data[ids], (weight,), bw, "embedding")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def straight_through(source: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value``; backward passes the gradient unchanged to ``source``."""
    value = np.asarray(value, dtype=source.dtype)
    if value.shape != source.shape:
        raise ValueError("straight-through value must match the source shape")
    return make_op(value.copy(), (source,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------------------
# 3-D convolution (N, C, T, H, W)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError("expected an int or a 3-tuple")
    return t


def _conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride, pad) -> np.ndarray:
    n, c, t, h, ww = x.shape
    o, c2, kt, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv3d channel mismatch: input {c}, weight {c2}")
    st, sh, sw = stride
    pt, ph, pw = pad
    to, ho, wo = (_conv_out_size(t, kt, st, pt), _conv_out_size(h, kh, sh, ph), _conv_out_size(ww, kw, sw, pw))
    if min(to, ho, wo) < 1:
        raise ValueError(f"conv3d input {x.shape[2:]} too small for kernel {w.shape[2:]}")
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(pad) else x
    acc = np.zeros((n, to, ho, wo, o), dtype=x.dtype)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                patch = xp[:, :, a : a + st * to : st, b : b + sh * ho : sh, d : d + sw * wo : sw]
                acc += np.tensordot(patch, w[:, :, a, b, d], axes=([1], [1]))
    return np.ascontiguousarray(np.moveaxis(acc, -1, 1))


def _conv_grad_input(g: np.ndarray, w: np.ndarray, x_shape, stride, pad) -> np.ndarray:
    n, c, t, h, ww = x_shape
    _, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    to, ho, wo = g.shape[2:]
    gxp = np.zeros((n, t + 2 * pt, h + 2 * ph, ww + 2 * pw, c), dtype=g.dtype)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                contrib = np.tensordot(g, w[:, :, a, b, d], axes=([1], [0]))  # n,to,ho,wo,c
                gxp[:, a : a + st * to : st, b : b + sh * ho : sh, d : d + sw * wo : sw] += contrib
    gxp = gxp[:, pt : pt + t, ph : ph + h, pw : pw + ww]
    return np.ascontiguousarray(np.moveaxis(gxp, -1, 1))


def _conv_grad_weight(g: np.ndarray, x: np.ndarray, w_shape, stride, pad) -> np.ndarray:
    _, _, kt, kh, kw = w_shape
    st, sh, sw = stride
    pt, ph, pw = pad
    to, ho, wo = g.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(pad) else x
    gw = np.zeros(w_shape, dtype=g.dtype)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                patch = xp[:, :, a : a + st * to : st, b : b + sh * ho : sh, d : d + sw * wo : sw]
                gw[:, :, a, b, d] = np.tensordot(g, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,T,H,W) with ``w`` (O,C,kt,kh,kw)."""
    stride, padding = _triple(stride), _triple(padding)
    out = _conv_fwd(x.data, w.data, stride, padding)

    def bw(g):
        gx = _conv_grad_input(g, w.data, x.shape, stride, padding) if x.requires_grad else None
        gw = _conv_grad_weight(g, x.data, w.shape, stride, padding) if w.requires_grad else None
        return gx, gw

    y = make_op(out, (x, w), bw, "conv3d")
    if bias is not None:
        y = y + reshape(bias, (1, -1, 1, 1, 1))
    return y


def conv_transpose3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Adjoint of ``conv3d``; ``w`` has shape (C_in, C_out, kt, kh, kw)."""
    stride, padding = _triple(stride), _triple(padding)
    n, c_in, t, h, ww = x.shape
    if w.shape[0] != c_in:
        raise ValueError(f"conv_transpose3d channel mismatch: input {c_in}, weight {w.shape[0]}")
    k = w.shape[2:]
    out_shape = (n, w.shape[1]) + tuple((d - 1) * s - 2 * p + kk for d, s, p, kk in zip((t, h, ww), stride, padding, k))
    out = _conv_grad_input(x.data, w.data, out_shape, stride, padding)

    def bw(g):
        gx = _conv_fwd(g, w.data, stride, padding) if x.requires_grad else None
        gw = _conv_grad_weight(x.data, g, w.shape, stride, padding) if w.requires_grad else None
        return gx, gw

    y = make_op(out, (x, w), bw, "conv_transpose3d")
    if bias is not None:
        y = y + reshape(bias, (1, -1, 1, 1, 1))
    return y
