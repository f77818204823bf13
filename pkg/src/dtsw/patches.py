"""Token-grid plumbing: patch partition, windows with cyclic shift, merge, expand.

Token order is row-major over the spatial grid (last axis fastest), and
tokens travel as a ``(batch, tokens, channels)`` tensor. Every op works for
any number of spatial axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import prod

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, linear, permute, reshape, take

MASK_VALUE = -1e9


@dataclass(frozen=True)
class GridShape:
    axes: tuple
    channels: int

    def __post_init__(self):
        if any(a < 1 for a in self.axes) or self.channels < 1:
            raise DimensionError(f"grid extents must be >= 1, got {self.axes}x{self.channels}")

    @property
    def tokens(self) -> int:
        return prod(self.axes)


@dataclass
class TokenGrid:
    shape: GridShape
    tokens: Tensor
    level: int = 0

    def __post_init__(self):
        t = self.tokens.shape
        if len(t) != 3 or t[1] != self.shape.tokens or t[2] != self.shape.channels:
            raise DimensionError(f"tokens {t} inconsistent with grid {self.shape}")

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    def with_tokens(self, tokens: Tensor) -> "TokenGrid":
        return TokenGrid(self.shape, tokens, self.level)


def _check_divisible(extents, factors, what: str) -> None:
    if len(extents) != len(factors):
        raise DimensionError(f"{what}: rank mismatch between extents {extents} and factors {factors}")
    for e, f in zip(extents, factors):
        if f < 1 or e % f:
            raise DimensionError(f"{what}: extent {tuple(extents)} not divisible by {tuple(factors)}")


def _interleave(a, b):
    out = ()
    for x, y in zip(a, b):
        out += (x, y)
    return out


# ---------------------------------------------------------------- patches


def patch_partition(volume, patch, level: int = 0) -> TokenGrid:
    """Split ``(batch, *spatial[, channels])`` into non-overlapping patch tokens.

    Each token is the concatenation of its raw voxel values.
    """
    x = as_tensor(volume)
    patch = tuple(patch)
    nd = len(patch)
    if x.ndim not in (nd + 1, nd + 2):
        raise DimensionError(f"volume of rank {x.ndim} does not match {nd}-D patch {patch}")
    batch, spatial = x.shape[0], x.shape[1 : 1 + nd]
    cin = x.shape[-1] if x.ndim == nd + 2 else 1
    _check_divisible(spatial, patch, "patch_partition")
    grid = tuple(s // p for s, p in zip(spatial, patch))
    x = reshape(x, (batch,) + _interleave(grid, patch) + (cin,))
    order = (0,) + tuple(1 + 2 * i for i in range(nd)) + tuple(2 + 2 * i for i in range(nd)) + (2 * nd + 1,)
    x = permute(x, order)
    tokens = reshape(x, (batch, prod(grid), prod(patch) * cin))
    return TokenGrid(GridShape(grid, prod(patch) * cin), tokens, level)


def patch_reassemble(grid: TokenGrid, patch) -> Tensor:
    """Inverse of :func:`patch_partition`; single-channel output drops the channel axis."""
    patch = tuple(patch)
    nd = len(patch)
    if len(grid.shape.axes) != nd:
        raise DimensionError(f"grid rank {len(grid.shape.axes)} does not match patch {patch}")
    c = grid.shape.channels
    if c % prod(patch):
        raise DimensionError(f"{c} channels cannot be reassembled into patch {patch}")
    cin = c // prod(patch)
    b = grid.batch
    x = reshape(grid.tokens, (b,) + grid.shape.axes + patch + (cin,))
    order = (0,) + _interleave(tuple(1 + i for i in range(nd)), tuple(1 + nd + i for i in range(nd))) + (2 * nd + 1,)
    x = permute(x, order)
    spatial = tuple(g * p for g, p in zip(grid.shape.axes, patch))
    return reshape(x, (b,) + spatial + ((cin,) if cin > 1 else ()))


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowLayout:
    axes: tuple
    window: tuple
    shift: tuple

    def __post_init__(self):
        _check_divisible(self.axes, self.window, "window layout")
        for w, s in zip(self.window, self.shift):
            if not 0 <= s < w:
                raise DimensionError(f"shift {self.shift} must satisfy 0 <= shift < window {self.window}")

    @property
    def num_windows(self) -> int:
        return prod(a // w for a, w in zip(self.axes, self.window))

    @property
    def window_tokens(self) -> int:
        return prod(self.window)

    @property
    def shifted(self) -> bool:
        return any(self.shift)

    @property
    def index(self) -> np.ndarray:
        """Grid token index for each (window, in-window position), row-major."""
        return _window_index(self.axes, self.window, self.shift)

    @property
    def inverse_index(self) -> np.ndarray:
        return _window_inverse(self.axes, self.window, self.shift)

    @property
    def mask(self) -> np.ndarray | None:
        """Additive ``(windows, T, T)`` mask, ``None`` when unshifted."""
        return _shift_mask(self.axes, self.window, self.shift) if self.shifted else None


def make_layout(axes, window, shifted: bool = False) -> WindowLayout:
    """Window layout with the window clamped to the grid.

    An axis no longer than its window is never shifted.
    """
    axes = tuple(axes)
    window = tuple(window) if not isinstance(window, int) else (window,) * len(axes)
    win = tuple(min(w, a) for w, a in zip(window, axes))
    shift = tuple(w // 2 if shifted and a > w else 0 for w, a in zip(win, axes))
    return WindowLayout(axes, win, shift)


def _shifted_coords(axes, window):
    nd = len(axes)
    nwin = tuple(a // w for a, w in zip(axes, window))
    idx = np.indices(nwin + tuple(window)).reshape(2 * nd, -1)
    return [idx[a] * window[a] + idx[nd + a] for a in range(nd)]


@lru_cache(maxsize=256)
def _window_index(axes, window, shift) -> np.ndarray:
    coords = _shifted_coords(axes, window)
    orig = [(c + s) % n for c, s, n in zip(coords, shift, axes)]
    out = np.ravel_multi_index(orig, axes).astype(np.intp)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=256)
def _window_inverse(axes, window, shift) -> np.ndarray:
    out = np.argsort(_window_index(axes, window, shift)).astype(np.intp)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=256)
def _shift_mask(axes, window, shift) -> np.ndarray:
    # region label per axis in the shifted frame: body / tail before wrap / wrapped
    coords = _shifted_coords(axes, window)
    label = np.zeros_like(coords[0])
    for c, w, s, n in zip(coords, window, shift, axes):
        region = np.where(c < n - w, 0, np.where(c < n - s, 1, 2))
        label = label * 3 + region
    t = prod(window)
    label = label.reshape(-1, t)
    mask = np.where(label[:, :, None] != label[:, None, :], MASK_VALUE, 0.0).astype(np.float32)
    mask.setflags(write=False)
    return mask


def window_partition(grid: TokenGrid, layout: WindowLayout) -> Tensor:
    """``(batch, N, C)`` tokens to ``(batch * windows, T, C)``, cyclically shifted first."""
    if tuple(grid.shape.axes) != tuple(layout.axes):
        raise DimensionError(f"layout for {layout.axes} applied to grid {grid.shape.axes}")
    x = take(grid.tokens, layout.index, axis=1, inverse=layout.inverse_index)
    return reshape(x, (grid.batch * layout.num_windows, layout.window_tokens, grid.shape.channels))


def window_reverse(windows: Tensor, layout: WindowLayout, shape: GridShape, level: int = 0) -> TokenGrid:
    """Undo :func:`window_partition`, including the cyclic shift."""
    nw, t = layout.num_windows, layout.window_tokens
    if windows.ndim != 3 or windows.shape[1] != t or windows.shape[0] % nw or windows.shape[2] != shape.channels:
        raise DimensionError(f"windows {windows.shape} inconsistent with layout ({nw} x {t}) and {shape}")
    batch = windows.shape[0] // nw
    x = reshape(windows, (batch, nw * t, shape.channels))
    x = take(x, layout.inverse_index, axis=1, inverse=layout.index)
    return TokenGrid(shape, x, level)


# ---------------------------------------------------------------- merge / expand


def merge_channels(c: int, factors) -> tuple[int, int]:
    """(concatenated channels, reduced channels) for a merge."""
    return c * prod(factors), 2 * c


def expand_channels(c: int, factors) -> tuple[int, int]:
    """(linear-mapped channels, channels per output token) for an expand."""
    f = prod(factors)
    if (2 * c) % f:
        raise DimensionError(f"2*{c} channels not divisible by expand factors {tuple(factors)}")
    return 2 * c, 2 * c // f


def patch_merge(grid: TokenGrid, factors, w_reduce: Tensor) -> TokenGrid:
    """Concatenate each ``factors`` neighbourhood, then reduce channels linearly."""
    factors = tuple(factors)
    nd = len(factors)
    _check_divisible(grid.shape.axes, factors, "patch_merge")
    c = grid.shape.channels
    c_cat, c_out = merge_channels(c, factors)
    if w_reduce.shape != (c_cat, c_out):
        raise DimensionError(f"reduction weight {w_reduce.shape}, expected {(c_cat, c_out)}")
    coarse = tuple(a // f for a, f in zip(grid.shape.axes, factors))
    b = grid.batch
    x = reshape(grid.tokens, (b,) + _interleave(coarse, factors) + (c,))
    order = (0,) + tuple(1 + 2 * i for i in range(nd)) + tuple(2 + 2 * i for i in range(nd)) + (2 * nd + 1,)
    x = reshape(permute(x, order), (b, prod(coarse), c_cat))
    return TokenGrid(GridShape(coarse, c_out), linear(x, w_reduce), grid.level + 1)


def patch_expand(grid: TokenGrid, factors, w_expand: Tensor) -> TokenGrid:
    """Double channels linearly, then redistribute them onto a finer grid."""
    factors = tuple(factors)
    nd = len(factors)
    if len(grid.shape.axes) != nd:
        raise DimensionError(f"expand factors {factors} for grid {grid.shape.axes}")
    c = grid.shape.channels
    f = prod(factors)
    # the default arithmetic is (c, 2c) -> 2c/F channels; other widths are
    # accepted as long as they split evenly over the F fine positions
    if len(w_expand.shape) != 2 or w_expand.shape[0] != c or w_expand.shape[1] % f:
        c_mid, _ = expand_channels(c, factors)
        raise DimensionError(f"expansion weight {w_expand.shape}, expected {(c, c_mid)}")
    c_out = w_expand.shape[1] // f
    b = grid.batch
    x = linear(grid.tokens, w_expand)
    x = reshape(x, (b,) + grid.shape.axes + factors + (c_out,))
    order = (0,) + _interleave(tuple(1 + i for i in range(nd)), tuple(1 + nd + i for i in range(nd))) + (2 * nd + 1,)
    fine = tuple(a * f for a, f in zip(grid.shape.axes, factors))
    x = reshape(permute(x, order), (b, prod(fine), c_out))
    return TokenGrid(GridShape(fine, c_out), x, grid.level - 1)
