import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtsw.patches import (
    MASK_VALUE,
    GridShape,
    TokenGrid,
    WindowLayout,
    expand_channels,
    make_layout,
    merge_channels,
    patch_expand,
    patch_merge,
    patch_partition,
    patch_reassemble,
    window_partition,
    window_reverse,
)
from dtsw.tensor import DimensionError, Tensor
from dtsw.verify import brute_force_mask, mask_cases


def random_grid(axes, c, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    shape = GridShape(tuple(axes), c)
    return TokenGrid(shape, Tensor(rng.normal(size=(batch, shape.tokens, c)).astype(np.float32)))


# ---------------------------------------------------------------- patches


def test_partition_counts():
    grid = patch_partition(np.zeros((1, 8, 8), np.float32), (4, 4))
    assert grid.shape == GridShape((2, 2), 16)
    assert grid.tokens.shape == (1, 4, 16)


def test_unit_patch_is_identity_embedding():
    x = np.random.default_rng(0).uniform(size=(2, 4, 6)).astype(np.float32)
    grid = patch_partition(x, (1, 1))
    np.testing.assert_array_equal(grid.tokens.data[..., 0], x.reshape(2, -1))


def test_partition_token_holds_its_patch():
    x = np.arange(64, dtype=np.float32).reshape(1, 8, 8)
    grid = patch_partition(x, (4, 4))
    # token 1 is the top-right patch, row-major inside
    np.testing.assert_array_equal(grid.tokens.data[0, 1], x[0, :4, 4:].ravel())


@pytest.mark.parametrize("shape,patch", [((2, 16, 16), (4, 4)), ((1, 8, 12), (2, 4)), ((2, 8, 8, 8), (2, 4, 2))])
def test_partition_reassemble_round_trip(shape, patch):
    x = np.random.default_rng(1).normal(size=shape).astype(np.float32)
    back = patch_reassemble(patch_partition(x, patch), patch).data
    assert back.tobytes() == x.tobytes()


def test_reassemble_zero_grid_and_idempotence():
    grid = TokenGrid(GridShape((4, 4), 16), Tensor(np.zeros((1, 16, 16))))
    np.testing.assert_array_equal(patch_reassemble(grid, (4, 4)).data, 0.0)
    x = np.random.default_rng(2).normal(size=(1, 16, 16)).astype(np.float32)
    g = patch_partition(x, (4, 4))
    once = patch_reassemble(g, (4, 4))
    twice = patch_reassemble(patch_partition(once, (4, 4)), (4, 4))
    assert once.data.tobytes() == twice.data.tobytes()


def test_partition_rejects_indivisible_extents():
    with pytest.raises(DimensionError):
        patch_partition(np.zeros((1, 10, 8), np.float32), (4, 4))


# ---------------------------------------------------------------- windows


def test_window_partition_counts():
    grid = random_grid((8, 8), 3)
    layout = make_layout((8, 8), (4, 4))
    assert window_partition(grid, layout).shape == (2 * 4, 16, 3)


@pytest.mark.parametrize("shift", [0, 2])
def test_window_round_trip_8x8(shift):
    grid = random_grid((8, 8), 5)
    layout = WindowLayout((8, 8), (4, 4), (shift, shift))
    back = window_reverse(window_partition(grid, layout), layout, grid.shape)
    assert back.tokens.data.tobytes() == grid.tokens.data.tobytes()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_window_round_trip_random_shifts(seed):
    rng = np.random.default_rng(seed)
    nd = int(rng.integers(1, 4))
    window = tuple(int(w) for w in rng.integers(1, 4, size=nd))
    axes = tuple(int(w * k) for w, k in zip(window, rng.integers(1, 4, size=nd)))
    shift = tuple(int(rng.integers(0, w)) for w in window)
    grid = random_grid(axes, 2, batch=1, seed=seed)
    layout = WindowLayout(axes, window, shift)
    back = window_reverse(window_partition(grid, layout), layout, grid.shape)
    assert back.tokens.data.tobytes() == grid.tokens.data.tobytes()


def test_window_contents_row_major():
    grid = TokenGrid(GridShape((4, 4), 1), Tensor(np.arange(16, dtype=np.float32).reshape(1, 16, 1)))
    w = window_partition(grid, make_layout((4, 4), (2, 2))).data[..., 0]
    np.testing.assert_array_equal(w[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(w[3], [10, 11, 14, 15])


def test_shifted_window_starts_at_shift():
    grid = TokenGrid(GridShape((4, 4), 1), Tensor(np.arange(16, dtype=np.float32).reshape(1, 16, 1)))
    w = window_partition(grid, make_layout((4, 4), (2, 2), shifted=True)).data[..., 0]
    np.testing.assert_array_equal(w[0], [5, 6, 9, 10])


def test_one_dimensional_toy_mask():
    # length 8, window 4, shift 2: only the wrapped window mixes tokens 6,7 with 0,1
    layout = WindowLayout((8,), (4,), (2,))
    mask = layout.mask
    assert mask.shape == (2, 4, 4)
    blocked = int((mask == MASK_VALUE).sum())
    assert blocked == int((brute_force_mask((8,), (4,), (2,)) == MASK_VALUE).sum())
    assert blocked == 8
    assert not (mask[0] != 0).any()


@pytest.mark.parametrize("axes,window", list(mask_cases()))
def test_mask_matches_brute_force(axes, window):
    layout = make_layout(axes, window, shifted=True)
    np.testing.assert_array_equal(layout.mask, brute_force_mask(axes, layout.window, layout.shift))


def test_unshifted_layout_has_no_mask():
    assert make_layout((8, 8), (4, 4)).mask is None


def test_window_clamped_to_small_grid():
    layout = make_layout((2, 2), (4, 4), shifted=True)
    assert layout.window == (2, 2) and layout.shift == (0, 0) and layout.num_windows == 1


def test_layout_rejects_bad_shift_and_extent():
    with pytest.raises(DimensionError):
        WindowLayout((8, 8), (4, 4), (4, 0))
    with pytest.raises(DimensionError):
        WindowLayout((6, 8), (4, 4), (0, 0))


def test_masked_pair_gets_negligible_attention():
    from dtsw.tensor import softmax

    layout = WindowLayout((4,), (2,), (1,))
    scores = np.random.default_rng(3).normal(size=(2, 2, 2)) + layout.mask
    a = softmax(Tensor(scores)).data
    assert a[layout.mask == MASK_VALUE].max() < 1e-6


# ---------------------------------------------------------------- merge / expand


def test_merge_shapes_paper_case():
    grid = random_grid((8, 8), 4)
    c_cat, c_out = merge_channels(4, (2, 2))
    assert (c_cat, c_out) == (16, 8)
    out = patch_merge(grid, (2, 2), Tensor(np.zeros((16, 8))))
    assert out.shape == GridShape((4, 4), 8)
    assert out.tokens.shape[1] == 64 // 4
    assert out.level == grid.level + 1


def test_merge_selector_returns_first_channels():
    grid = random_grid((4, 4), 3, batch=1)
    sel = np.zeros((12, 6), np.float32)
    sel[:6, :6] = np.eye(6)
    out = patch_merge(grid, (2, 2), Tensor(sel)).tokens.data
    x = grid.tokens.data.reshape(1, 4, 4, 3)
    # first coarse token concatenates (0,0), (0,1) ... ; its first 2C channels are tokens (0,0) and (0,1)
    np.testing.assert_array_equal(out[0, 0], np.concatenate([x[0, 0, 0], x[0, 0, 1]]))


def test_expand_shapes_paper_case():
    grid = random_grid((4, 4), 8)
    assert expand_channels(8, (2, 2)) == (16, 4)
    out = patch_expand(grid, (2, 2), Tensor(np.zeros((8, 16))))
    assert out.shape == GridShape((8, 8), 4)
    assert out.tokens.shape[1] == 4 * 16


@pytest.mark.parametrize("axes,c,factors", [((8, 8), 4, (2, 2)), ((4, 8, 8), 6, (1, 2, 2)), ((4, 4, 4), 8, (2, 2, 2))])
def test_expand_after_merge_restores_grid_shape(axes, c, factors):
    grid = random_grid(axes, c)
    c_cat, c_out = merge_channels(c, factors)
    merged = patch_merge(grid, factors, Tensor(np.zeros((c_cat, c_out))))
    lin, _ = expand_channels(merged.shape.channels, factors)
    back = patch_expand(merged, factors, Tensor(np.zeros((merged.shape.channels, lin))))
    assert back.shape.axes == grid.shape.axes
    assert back.level == grid.level


def test_expand_places_channels_on_fine_positions():
    grid = TokenGrid(GridShape((1, 1), 2), Tensor(np.array([[[1.0, 2.0]]])))
    w = np.arange(8, dtype=np.float32).reshape(2, 4) / 10
    out = patch_expand(grid, (2, 2), Tensor(w))
    lin = np.array([1.0, 2.0]) @ w
    np.testing.assert_allclose(out.tokens.data[0, :, 0], lin, rtol=1e-6)


def test_merge_expand_reject_wrong_weights():
    grid = random_grid((4, 4), 4)
    with pytest.raises(DimensionError):
        patch_merge(grid, (2, 2), Tensor(np.zeros((16, 4))))
    with pytest.raises(DimensionError):
        patch_expand(grid, (2, 2), Tensor(np.zeros((4, 7))))
    with pytest.raises(DimensionError):
        patch_merge(random_grid((3, 4), 4), (2, 2), Tensor(np.zeros((16, 8))))
