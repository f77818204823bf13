"""Windowed multi-head self-attention with relative position bias, and the
pre-LN transformer block built from a regular and a shifted sub-block."""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from dataclasses import dataclass
from math import prod, sqrt

import numpy as np

from .module import LayerNorm, Linear, Module, param
from .patches import TokenGrid, WindowLayout, make_layout, window_partition, window_reverse
from .tensor import DimensionError, Tensor, add, gelu, linear, matmul, permute, reshape, softmax, take, transpose

_counter = threading.local()


@contextlib.contextmanager
def count_projections():
    """Collect ``(role, kind)`` for every q/k/v projection evaluated inside the block."""
    counts: Counter = Counter()
    outer = getattr(_counter, "active", None)
    _counter.active = counts
    try:
        yield counts
    finally:
        _counter.active = outer


def _note(role: str, kind: str) -> None:
    counts = getattr(_counter, "active", None)
    if counts is not None:
        counts[(role, kind)] += 1


def _scale(channels: int, heads: int, scale_mode: str) -> float:
    if scale_mode == "per_head":
        return 1.0 / sqrt(channels // heads)
    if scale_mode == "full_c":
        return 1.0 / sqrt(channels)
    raise ValueError(f"unknown scale mode {scale_mode!r}")


class ValueProjection(Module):
    """Value and output projections only; owns no query or key weights."""

    def __init__(self, rng, dim: int, heads: int, role: str = ""):
        if dim % heads:
            raise DimensionError(f"{dim} channels not divisible by {heads} heads")
        self.heads = heads
        self.role = role
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def value(self, x: Tensor) -> Tensor:
        _note(self.role, "v")
        return self.v(x)


class AttentionProjection(ValueProjection):
    """Query, key and value projections plus the output projection."""

    def __init__(self, rng, dim: int, heads: int, role: str = "", scale_mode: str = "per_head"):
        super().__init__(rng, dim, heads, role)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.scale = _scale(dim, heads, scale_mode)

    def query(self, x: Tensor) -> Tensor:
        _note(self.role, "q")
        return self.q(x)

    def key(self, x: Tensor) -> Tensor:
        _note(self.role, "k")
        return self.k(x)


class RelativePositionBias(Module):
    """Learnable per-head bias indexed by relative in-window offset."""

    def __init__(self, window, heads: int):
        self.window = tuple(window)
        self.heads = heads
        self.table = param(np.zeros((prod(2 * w - 1 for w in self.window), heads)))
        self._index = relative_position_index(self.window)

    @property
    def index(self) -> np.ndarray:
        return self._index

    def __call__(self) -> Tensor:
        t = prod(self.window)
        b = take(self.table, self._index.reshape(-1), axis=0)
        return permute(reshape(b, (t, t, self.heads)), (2, 0, 1))


def relative_position_index(window) -> np.ndarray:
    """``(T, T)`` table rows for each ordered pair of in-window positions."""
    window = tuple(window)
    coords = np.indices(window).reshape(len(window), -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (np.array(window) - 1)[:, None, None]
    return np.ravel_multi_index(tuple(rel), tuple(2 * w - 1 for w in window)).astype(np.intp)


@dataclass
class AttentionMap:
    """Row-stochastic ``(batch * windows, heads, T, T)`` attention weights."""

    values: Tensor
    layout: WindowLayout

    def max_row_error(self) -> float:
        return float(np.abs(self.values.data.sum(axis=-1, dtype=np.float64) - 1.0).max())


def split_heads(x: Tensor, heads: int) -> Tensor:
    bw, t, c = x.shape
    return permute(reshape(x, (bw, t, heads, c // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    bw, h, t, d = x.shape
    return reshape(permute(x, (0, 2, 1, 3)), (bw, t, h * d))


def attention_weights(q: Tensor, k: Tensor, scale: float, bias: Tensor | None, mask, num_windows: int) -> Tensor:
    """softmax(q k^T * scale + bias + mask) over keys, per head."""
    s = matmul(q, transpose(k)) * scale
    if bias is not None:
        s = add(s, bias)
    if mask is not None:
        bw, h, t, _ = s.shape
        s = reshape(s, (bw // num_windows, num_windows, h, t, t))
        s = add(s, mask[None, :, None])
        s = reshape(s, (bw, h, t, t))
    return softmax(s, axis=-1)


def window_self_attention(x: Tensor, proj: AttentionProjection, bias: RelativePositionBias | None, mask=None, num_windows: int = 1):
    """Multi-head attention inside each window of ``x`` (``(batch*windows, T, C)``).

    Returns the head-concatenated ``A @ v`` (before the output projection)
    and the attention weights ``A``.
    """
    if x.shape[-1] % proj.heads:
        raise DimensionError(f"{x.shape[-1]} channels not divisible by {proj.heads} heads")
    q = split_heads(proj.query(x), proj.heads)
    k = split_heads(proj.key(x), proj.heads)
    v = split_heads(proj.value(x), proj.heads)
    a = attention_weights(q, k, proj.scale, bias() if bias is not None else None, mask, num_windows)
    return merge_heads(matmul(a, v)), a


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


class MLP(Module):
    def __init__(self, rng, dim: int, ratio: float):
        hidden = int(round(dim * ratio))
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp(x, self.fc1.w, self.fc1.b, self.fc2.w, self.fc2.b)


class SwinSubBlock(Module):
    """x <- x + MSA(LN(x)); x <- x + MLP(LN(x)) over one window layout."""

    def __init__(self, rng, dim: int, heads: int, layout: WindowLayout, mlp_ratio: float = 4.0,
                 scale_mode: str = "per_head", role: str = ""):
        self.layout = layout
        self.norm1 = LayerNorm(dim)
        self.attn = AttentionProjection(rng, dim, heads, role, scale_mode)
        self.bias = RelativePositionBias(layout.window, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio)

    def __call__(self, grid: TokenGrid) -> tuple[TokenGrid, AttentionMap]:
        lay = self.layout
        h = grid.with_tokens(self.norm1(grid.tokens))
        y, a = window_self_attention(window_partition(h, lay), self.attn, self.bias, lay.mask, lay.num_windows)
        y = window_reverse(self.attn.out(y), lay, grid.shape, grid.level)
        x = add(grid.tokens, y.tokens)
        x = add(x, self.mlp(self.norm2(x)))
        return grid.with_tokens(x), AttentionMap(a, lay)


class SwinBlock(Module):
    """Regular-window sub-block followed by a shifted-window sub-block."""

    def __init__(self, rng, dim: int, heads: int, window, axes, mlp_ratio: float = 4.0,
                 scale_mode: str = "per_head", role: str = "block"):
        if heads < 1 or dim % heads:
            raise DimensionError(f"{dim} channels not divisible by {heads} heads")
        self.dim = dim
        self.axes = tuple(axes)
        self.regular = SwinSubBlock(rng, dim, heads, make_layout(axes, window, False), mlp_ratio, scale_mode,
                                    f"{role}.regular")
        self.shifted = SwinSubBlock(rng, dim, heads, make_layout(axes, window, True), mlp_ratio, scale_mode,
                                    f"{role}.shifted")

    def __call__(self, grid: TokenGrid) -> tuple[TokenGrid, AttentionMap, AttentionMap]:
        if tuple(grid.shape.axes) != self.axes or grid.shape.channels != self.dim:
            raise DimensionError(f"block built for {self.axes}x{self.dim}, got {grid.shape}")
        grid, a_reg = self.regular(grid)
        grid, a_shift = self.shifted(grid)
        return grid, a_reg, a_shift


def swin_block(grid: TokenGrid, block: SwinBlock):
    return block(grid)
