"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations only record onto a :class:`Tape` while one is active (``with
Tape() as tape: ...``); outside a tape every op is a plain numpy call, which
is the inference path. Storage defaults to float32; reductions accumulate in
float64. Ops follow numpy type promotion, so a float64 input propagates
float64 downstream (the finite-difference oracle relies on this).
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on invalid use of the gradient tape."""


_local = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


def _debug_enabled() -> bool:
    return os.environ.get("DTSW_DEBUG", "") == "1"


@dataclass
class Node:
    kind: str
    inputs: tuple
    backward: Callable
    out: "Tensor"


@dataclass
class Tape:
    """Ordered record of differentiable ops for one training step.

    Node ids are positions in :attr:`nodes`, so inputs always precede the
    nodes that consume them. Leaf gradients accumulate into ``Tensor.grad``.
    """

    debug: bool = field(default_factory=_debug_enabled)
    nodes: list = field(default_factory=list)

    def __post_init__(self):
        self._roots: set[int] = set()
        self._outer = None

    def __enter__(self) -> "Tape":
        self._outer = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._outer
        return False

    def record(self, out: "Tensor", kind: str, inputs: tuple, backward: Callable) -> None:
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(kind, inputs, backward, out))

    def reset(self) -> None:
        """Allow ``backward`` to run again from roots already used."""
        self._roots.clear()

    def backward(self, loss: "Tensor") -> None:
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("loss is detached from this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id in self._roots:
            raise TapeError("backward already ran from this loss; call reset() first")
        self._roots.add(loss.node_id)

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    gi = unbroadcast(gi, t.data.shape)
                if t.node_id is None or t._tape is not self:
                    t.grad = gi.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(t.node_id)
                    grads[t.node_id] = gi if prev is None else prev + gi

    def grad(self, t: "Tensor") -> np.ndarray:
        """Gradient of a leaf, zeros when the last loss did not reach it."""
        return np.zeros_like(t.data) if t.grad is None else t.grad


class Tensor:
    """An n-dimensional float array with optional tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None
        self._tape = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype.kind == "f":
        return Tensor._wrap(x)
    return Tensor(x)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over axes that were broadcast to reach its shape."""
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    if axes:
        g = g.sum(axis=axes, dtype=np.float64).astype(g.dtype)
    return g.reshape(shape)


def _emit(arr: np.ndarray, kind: str, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(out, kind, inputs, backward)
        if tape.debug and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite output from op {kind!r}")
    return out


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def _data(x):
    return x.data if isinstance(x, Tensor) else x


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a_, b_ = _data(a), _data(b)
    return _emit(a_ + b_, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a_, b_ = _data(a), _data(b)
    return _emit(a_ - b_, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a_, b_ = _data(a), _data(b)

    def backward(g):
        return (g * b_ if _needs(a) else None, g * a_ if _needs(b) else None)

    return _emit(a_ * b_, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a_, b_ = _data(a), _data(b)

    def backward(g):
        ga = g / b_ if _needs(a) else None
        gb = -g * a_ / (b_ * b_) if _needs(b) else None
        return ga, gb

    return _emit(a_ / b_, "div", (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return _emit(x**p, "pow", (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.log(x), "log", (a,), lambda g: (g / x,))


def tabs(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.abs(x), "abs", (a,), lambda g: (g * np.sign(x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.maximum(x, 0), "relu", (a,), lambda g: (g * (x > 0),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = np.ascontiguousarray(a.data)
    y, cdf = _kernels.gelu_fwd(x)
    return _emit(y, "gelu", (a,), lambda g: (_kernels.gelu_bwd(x, cdf, np.ascontiguousarray(g)),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(y, "sigmoid", (a,), lambda g: (g * y * (1 - y),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = a.data
    y = np.logaddexp(0, x).astype(x.dtype, copy=False)
    return _emit(y, "softplus", (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a_, b_ = _data(a), _data(b)
    if a_.ndim < 2 or b_.ndim < 2 or a_.shape[-1] != b_.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a_.shape} x {b_.shape}")
    try:
        out = np.matmul(a_, b_)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims not broadcastable: {a_.shape} x {b_.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b_, -1, -2)) if _needs(a) else None
        gb = np.matmul(np.swapaxes(a_, -1, -2), g) if _needs(b) else None
        return ga, gb

    return _emit(out, "matmul", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    x_, w_ = x.data, w.data
    if x_.shape[-1] != w_.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x_.shape} x {w_.shape}")
    out = x_ @ w_
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ w_.T) if _needs(x) else None
        gw = (x_.reshape(-1, x_.shape[-1]).T @ g2) if _needs(w) else None
        gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype) if _needs(b) else None
        return gx, gw, gb

    return _emit(out, "linear", (x, w, b), backward)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _emit(out, "reshape", (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), "permute", (a,), lambda g: (np.transpose(g, inv),))


def transpose(a: Tensor, ax1: int = -1, ax2: int = -2) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return permute(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [_data(t) for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[x.shape for x in arrays]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, "concat", tuple(tensors), backward)


def index(a: Tensor, idx) -> Tensor:
    x = a.data
    out = x[idx]
    advanced = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx)
    )

    def backward(g):
        gx = np.zeros_like(x, dtype=g.dtype)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return _emit(out, "index", (a,), backward)


def split(a: Tensor, sections, axis: int = -1) -> list[Tensor]:
    """Split into equal ``sections`` (int) or pieces of the given sizes."""
    n = a.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise DimensionError(f"axis of size {n} not divisible into {sections} sections")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise DimensionError(f"split sizes {sizes} do not sum to {n}")
    axis = axis % a.ndim
    pieces, start = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + s)
        pieces.append(index(a, tuple(sl)))
        start += s
    return pieces


def take(a: Tensor, indices: np.ndarray, axis: int = 0, inverse: np.ndarray | None = None) -> Tensor:
    """Gather along ``axis``.

    When ``indices`` is a permutation, passing its ``inverse`` makes the
    backward pass a gather instead of a scatter-add.
    """
    x = a.data
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x, indices, axis=axis)

    def backward(g):
        if inverse is not None:
            return (np.take(g, inverse, axis=axis),)
        gx = np.zeros_like(x, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (gx,)

    return _emit(out, "take", (a,), backward)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(x.sum(axis=axes, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _emit(out, "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[i] for i in axes]))
    out = np.asarray(x.mean(axis=axes, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _emit(out, "mean", (a,), backward)


# ---------------------------------------------------------------- normalisation


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = a.data
    axis = axis % x.ndim
    moved = np.ascontiguousarray(np.moveaxis(x, axis, -1))
    flat_shape = (-1, moved.shape[-1])
    y = _kernels.softmax_fwd(moved.reshape(flat_shape)).reshape(moved.shape)

    def backward(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1))
        gx = _kernels.softmax_bwd(y.reshape(flat_shape), gm.reshape(flat_shape))
        return (np.moveaxis(gx.reshape(moved.shape), -1, axis),)

    return _emit(np.moveaxis(y, -1, axis), "softmax", (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each token over the last axis, then ``gamma * x_hat + beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    dtype = np.result_type(a.data, gamma.data, beta.data)
    x = np.ascontiguousarray(a.data, dtype=dtype)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} for {c} channels")
    x2 = x.reshape(-1, c)
    y, xhat, rstd = _kernels.layernorm_fwd(x2, gamma.data.astype(dtype), beta.data.astype(dtype), eps)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, c)
        g2 = g2.astype(dtype, copy=False)
        gx, gg, gb = _kernels.layernorm_bwd(g2, xhat, rstd, gamma.data.astype(dtype))
        return gx.reshape(x.shape), gg, gb

    return _emit(y.reshape(x.shape), "layer_norm", (a, gamma, beta), backward)


# ---------------------------------------------------------------- losses


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean ``-log p[label]`` over the batch; ``probs`` is (batch, classes)."""
    p = probs.data
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if p.ndim != 2 or labels.shape[0] != p.shape[0]:
        raise DimensionError(f"cross_entropy expects (batch, classes) and batch labels, got {p.shape}")
    if labels.min() < 0 or labels.max() >= p.shape[1]:
        raise ValueError(f"label out of range for {p.shape[1]} classes")
    rows = np.arange(p.shape[0])
    picked = np.maximum(p[rows, labels].astype(np.float64), 1e-12)
    out = np.asarray(-np.log(picked).mean(), dtype=p.dtype)

    def backward(g):
        gp = np.zeros_like(p)
        gp[rows, labels] = -g / (picked * p.shape[0])
        return (gp,)

    return _emit(out, "cross_entropy", (probs,), backward)


def l1_loss(pred: Tensor, target) -> Tensor:
    return mean(tabs(sub(pred, target)))


def backward(loss: Tensor) -> None:
    """Backpropagate from ``loss`` on the tape that recorded it."""
    if loss._tape is None:
        raise TapeError("loss is detached (no tape recorded it)")
    loss._tape.backward(loss)
