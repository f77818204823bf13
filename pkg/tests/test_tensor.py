import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtsw import tensor as T
from dtsw.gradcheck import finite_diff_check, relative_error
from dtsw.optim import Adam, AdamState, adam_step, clip_grad_norm, cosine_lr
from dtsw.tensor import Tape, TapeError, Tensor
from dtsw.verify import GRAD_FLOOR, _primitive_cases, primitive_errors


def grads_of(loss_fn, *leaves):
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [tape.grad(t) for t in leaves]


# ---------------------------------------------------------------- forward values


def test_matmul_closed_form():
    a = Tensor([[1, 2], [3, 4]])
    b = Tensor([[5, 6], [7, 8]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])


def test_matmul_identity():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(5))).data, a.data)


def test_softmax_closed_forms():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-6)


def test_softmax_large_logits_stay_finite():
    out = T.softmax(Tensor([1e4, 0.0, -1e4])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0])


def test_layer_norm_constant_token_is_zero():
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_two_values():
    out = T.layer_norm(Tensor([[1.0, 3.0]], dtype=np.float64), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


def test_layer_norm_rejects_bad_eps_and_shapes():
    x = Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    with pytest.raises(T.DimensionError):
        T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_reshape_round_trip_bit_exact():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 6)))
    back = T.reshape(T.reshape(x, (3, 8)), (4, 6))
    assert back.data.tobytes() == x.data.tobytes()


def test_linear_identity():
    x = Tensor(np.random.default_rng(2).normal(size=(5, 4)))
    out = T.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x.data)


def test_gelu_is_exact_erf_form():
    from scipy.special import erf

    x = np.linspace(-4, 4, 41)
    want = 0.5 * x * (1 + erf(x / np.sqrt(2)))
    np.testing.assert_allclose(T.gelu(Tensor(x, dtype=np.float64)).data, want, atol=1e-12)


def test_split_and_concat_invert():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    parts = T.split(x, 2, axis=1)
    assert [p.shape for p in parts] == [(3, 2), (3, 2)]
    np.testing.assert_array_equal(T.concat(parts, axis=1).data, x.data)


def test_cross_entropy_closed_forms():
    assert float(T.cross_entropy(Tensor([[1.0, 0.0]]), [0]).data) == pytest.approx(0.0, abs=1e-7)
    assert float(T.cross_entropy(Tensor([[0.5, 0.5]]), [1]).data) == pytest.approx(np.log(2), rel=1e-6)
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor([[0.5, 0.5]]), [2])


# ---------------------------------------------------------------- backward


def test_sum_of_squares_gradient_is_2x():
    x = Tensor(np.random.default_rng(3).normal(size=(3, 4)))
    (g,) = grads_of(lambda: T.tsum(T.mul(x, x)), x)
    np.testing.assert_allclose(g, 2 * x.data, rtol=1e-6)


def test_unreached_leaf_has_zero_gradient():
    x = Tensor(np.ones(3))
    y = Tensor(np.ones(3))
    gx, gy = grads_of(lambda: T.tsum(T.mul(x, 2.0)), x, y)
    np.testing.assert_array_equal(gx, 2.0)
    np.testing.assert_array_equal(gy, 0.0)


def test_gradient_accumulates_over_reuse():
    x = Tensor([1.0, 2.0])
    (g,) = grads_of(lambda: T.tsum(T.add(T.mul(x, 3.0), T.mul(x, x))), x)
    np.testing.assert_allclose(g, 3.0 + 2 * x.data)


def test_broadcast_gradient_is_reduced_to_input_shape():
    a = Tensor(np.ones((3, 4)))
    b = Tensor(np.ones((4,)))
    ga, gb = grads_of(lambda: T.tsum(T.mul(a, b)), a, b)
    assert ga.shape == (3, 4) and gb.shape == (4,)
    np.testing.assert_array_equal(gb, 3.0)


def test_backward_twice_needs_reset():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.mul(x, x))
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)
    tape.reset()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4.0)


def test_backward_rejects_non_scalar_and_detached():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(TapeError):
        tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(Tensor(1.0))


def test_topological_order_inputs_precede_nodes():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        T.tsum(T.exp(T.mul(x, x)))
    for i, node in enumerate(tape.nodes):
        for t in node.inputs:
            if isinstance(t, Tensor) and t.node_id is not None and t._tape is tape:
                assert t.node_id < i


def test_no_tape_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, 2.0)
    assert y.node_id is None


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_debug_mode_flags_non_finite(monkeypatch):
    monkeypatch.setenv("DTSW_DEBUG", "1")
    x = Tensor([1.0, 0.0], requires_grad=True)
    with Tape() as tape:
        assert tape.debug
        with pytest.raises(FloatingPointError):
            T.log(x)


@pytest.fixture(scope="module")
def primitive_table():
    return primitive_errors(seed=0)


@pytest.mark.parametrize("case", [c[0] for c in _primitive_cases(np.random.default_rng(0))])
def test_primitive_gradients_match_finite_differences(case, primitive_table):
    assert primitive_table[case] <= 1e-3


def test_composite_two_block_network_gradient():
    from dtsw.attention import SwinBlock
    from dtsw.patches import GridShape, TokenGrid

    rng = np.random.default_rng(4)
    blocks = [SwinBlock(rng, 8, 2, (2, 2), (4, 4), 2.0) for _ in range(2)]
    x = rng.normal(size=(1, 16, 8)).astype(np.float32)
    w = rng.normal(size=(1, 16, 8))

    def f(_):
        g = TokenGrid(GridShape((4, 4), 8), Tensor(x))
        for b in blocks:
            g, _, _ = b(g)
        return T.tsum(T.mul(g.tokens, w))

    for name, p in blocks[0].named_parameters().items():
        coords = rng.choice(p.size, min(4, p.size), replace=False)
        assert finite_diff_check(f, p, coords=coords, floor=GRAD_FLOOR) <= 1e-3, name


def test_finite_diff_linear_is_near_exact():
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4)), requires_grad=True)
    w = np.random.default_rng(6).normal(size=(3, 4))
    assert finite_diff_check(lambda t: T.tsum(T.mul(t, w)), x) < 1e-4


def test_finite_diff_softmax_linear():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    W = Tensor(rng.normal(size=(4, 5)))
    r = rng.normal(size=(3, 5))
    assert finite_diff_check(lambda t: T.tsum(T.mul(T.softmax(T.linear(t, W)), r)), x, h=1e-3) < 1e-3


def test_finite_diff_rejects_zero_step():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: T.tsum(t), x, h=0.0)


def test_relative_error_floor_handles_exact_zero_gradients():
    assert relative_error(np.array([1e-14]), np.array([0.0])) == 1.0
    assert relative_error(np.array([1e-14]), np.array([0.0]), floor=1e-6) < 1e-7
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    y = T.softmax(Tensor(x, dtype=np.float64), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_layer_norm_output_is_standardised(x):
    y = T.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1]))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    assert np.all(y.var(axis=-1) <= 1.0 + 1e-9)


# ---------------------------------------------------------------- optimizer


def test_adam_zero_gradient_leaves_everything_unchanged():
    p = Tensor(np.array([1.0, -2.0]))
    state = AdamState()
    adam_step({"p": p}, {"p": np.zeros(2)}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_array_equal(state.m["p"], 0.0)
    np.testing.assert_array_equal(state.v["p"], 0.0)


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.zeros(4), dtype=np.float64)
    adam_step({"p": p}, {"p": np.array([1.0, -3.0, 10.0, -0.5])}, AdamState(lr=1e-3))
    np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=1e-6)
    assert np.all(np.sign(p.data) == [-1, 1, -1, 1])


def test_adam_solves_quadratic():
    target = np.array([0.3, -1.2, 2.0])
    w = Tensor(np.zeros(3), dtype=np.float64)
    opt = Adam({"w": w}, lr=0.05)
    for _ in range(500):
        w.grad = 2 * (w.data - target)
        opt.step()
    assert np.linalg.norm(w.data - target) < 1e-3


def test_adam_rejects_mismatched_gradient():
    with pytest.raises(T.DimensionError):
        adam_step({"p": Tensor(np.zeros(2))}, {"p": np.zeros(3)}, AdamState())


def test_clip_grad_norm_scales_to_max():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    total = np.sqrt(sum(np.sum(g**2) for g in grads.values()))
    assert total == pytest.approx(1.0)
    untouched = {"a": np.array([0.1])}
    clip_grad_norm(untouched, 1.0)
    assert untouched["a"][0] == 0.1


def test_cosine_schedule_endpoints():
    assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0)
    lrs = [cosine_lr(1e-3, s, 100) for s in range(101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
