"""Built-in oracle suite behind ``dtsw verify``.

Every check is a small function that raises ``AssertionError`` with a
message on failure and returns a one-line detail string on success.
"""

from __future__ import annotations

import contextlib
import itertools
import sys
import tempfile
import time
import traceback
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from . import _kernels
from . import checkpoint as ckpt_io
from . import interactive
from .attention import count_projections
from .data import (
    check_label_consistency,
    load_rvol,
    make_phantoms,
    parse_rvol,
    rvol_bytes,
    save_rvol,
)
from .gradcheck import finite_diff_check, numeric_grad, relative_error
from .gradnorm import gradnorm_update
from .metrics import auc, psnr, ssim
from .model import (
    Discriminator,
    DualTaskModel,
    TaskWeights,
    compute_losses,
    desk_2d,
    desk_3d,
    tiny_2d,
)
from .patches import (
    MASK_VALUE,
    GridShape,
    TokenGrid,
    expand_channels,
    make_layout,
    merge_channels,
    patch_expand,
    patch_merge,
    window_partition,
    window_reverse,
)
from . import tensor as T
from .tensor import Tape, Tensor

GRAD_TOL = 1e-3
# Gradient scale below which a tensor counts as zero-gradient. Key biases are
# exactly zero in theory (softmax shift invariance) but carry float32 residue;
# with tolerance 1e-3 this only forgives absolute errors under 1e-7.
GRAD_FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    ok: bool
    seconds: float
    detail: str


@dataclass
class SuiteResult:
    results: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    @property
    def failed(self) -> list:
        return [r for r in self.results if not r.ok]


_CHECKS: list = []


def check(name: str, slow: bool = False):
    def register(fn):
        _CHECKS.append((name, fn, slow))
        return fn

    return register


def check_names(quick: bool = False) -> list[str]:
    return [n for n, _, slow in _CHECKS if not (quick and slow)]


# ---------------------------------------------------------------- gradients


def _primitive_cases(rng):
    """(name, input shape, function of the input) for every differentiable primitive."""
    other = rng.normal(size=(3, 4))
    pos = lambda t: T.add(T.tabs(t), 0.5)  # noqa: E731
    gamma = Tensor(rng.normal(size=4))
    beta = Tensor(rng.normal(size=4))
    idx = np.array([2, 0, 1, 2])
    perm = rng.permutation(12)
    return [
        ("add", (3, 4), lambda t: T.add(t, other)),
        ("add_broadcast", (3, 4), lambda t: T.add(T.mean(t, axis=0, keepdims=True), other)),
        ("sub", (3, 4), lambda t: T.sub(other, t)),
        ("mul", (3, 4), lambda t: T.mul(t, t)),
        ("div", (3, 4), lambda t: T.div(t, pos(t))),
        ("power", (3, 4), lambda t: T.power(pos(t), 1.7)),
        ("exp", (3, 4), lambda t: T.exp(t)),
        ("log", (3, 4), lambda t: T.log(pos(t))),
        ("abs", (3, 4), lambda t: T.tabs(T.add(t, 0.01))),
        ("relu", (3, 4), lambda t: T.relu(t)),
        ("gelu", (3, 4), lambda t: T.gelu(t)),
        ("sigmoid", (3, 4), lambda t: T.sigmoid(t)),
        ("softplus", (3, 4), lambda t: T.softplus(t)),
        ("matmul", (2, 3, 4), lambda t: T.matmul(t, T.transpose(t))),
        ("linear", (3, 4), lambda t: T.linear(t, T.reshape(T.index(t, slice(0, 3)), (4, 3)), T.index(t, (0, slice(0, 3))))),
        ("reshape", (3, 4), lambda t: T.reshape(t, (2, 6))),
        ("permute", (2, 3, 4), lambda t: T.permute(t, (2, 0, 1))),
        ("concat", (3, 4), lambda t: T.concat([t, T.mul(t, t)], axis=1)),
        ("index", (3, 4), lambda t: T.index(t, (slice(None), idx))),
        ("split", (3, 4), lambda t: T.mul(*T.split(t, 2, axis=1))),
        ("take", (3, 4), lambda t: T.take(T.reshape(t, (12,)), perm, inverse=np.argsort(perm))),
        ("take_repeat", (3, 4), lambda t: T.take(t, idx, axis=1)),
        ("sum", (3, 4), lambda t: T.tsum(T.mul(t, t), axis=1)),
        ("mean", (3, 4), lambda t: T.mean(T.mul(t, t), axis=0)),
        ("softmax", (3, 4), lambda t: T.softmax(t, axis=-1)),
        ("softmax_axis0", (3, 4), lambda t: T.softmax(t, axis=0)),
        ("layer_norm", (3, 4), lambda t: T.layer_norm(t, gamma, beta)),
        ("cross_entropy", (3, 4), lambda t: T.cross_entropy(T.softmax(t), np.array([0, 3, 1]))),
        ("l1_loss", (3, 4), lambda t: T.l1_loss(t, other)),
    ]


def primitive_errors(seed: int = 0) -> dict[str, float]:
    """Relative error of each primitive under a random linear read-out."""
    rng = np.random.default_rng(seed)
    errors = {}
    for name, shape, fn in _primitive_cases(rng):
        x = Tensor(rng.normal(size=shape).astype(np.float32), requires_grad=True)
        w = rng.normal(size=fn(x).shape)
        errors[name] = finite_diff_check(lambda t, fn=fn, w=w: T.tsum(T.mul(fn(t), w)), x, floor=GRAD_FLOOR)
    return errors


@check("grad.primitives")
def _grad_primitives():
    errors = primitive_errors()
    bad = {k: v for k, v in errors.items() if not v <= GRAD_TOL}
    assert not bad, f"gradient mismatch: {bad}"
    return f"{len(errors)} primitives, worst {max(errors.values()):.2e}"


def model_grad_errors(cfg, samples: int = 8, seed: int = 1, jitter: float = 0.1) -> dict[str, float]:
    """Finite-difference error per parameter tensor of the full dual-task loss.

    Parameters get a random perturbation first so LayerNorm gains, biases and
    position tables are not sitting at their special initial values. The step
    is 1e-4: the L1 term has a kink per pixel, and a wider step crosses some.
    """
    rng = np.random.default_rng(seed)
    model = DualTaskModel(cfg, rng)
    disc = Discriminator(rng, cfg)
    for p in model.parameters():
        p.data = p.data + rng.normal(0, jitter, p.data.shape).astype(p.data.dtype)
    shape = (2,) + tuple(cfg.input_extents)
    xs = rng.uniform(size=shape).astype(np.float32)
    ys = rng.uniform(size=shape).astype(np.float32)
    labels = np.array([0, 1])
    weights = TaskWeights(0.7, 1.3)

    def loss(_):
        out = model(Tensor(xs))
        return compute_losses(out.pred_scan, ys, out.probs, labels, disc, weights, cfg.adv_weight).total

    params = model.named_parameters()
    with Tape() as tape:
        total = loss(None)
    tape.backward(total)
    errors = {}
    for name, p in params.items():
        coords = rng.choice(p.size, size=min(samples, p.size), replace=False)
        analytic = tape.grad(p).astype(np.float64).ravel()[coords]
        errors[name] = relative_error(analytic, numeric_grad(loss, p, h=1e-4, coords=coords), GRAD_FLOOR)
    return errors


@check("grad.model_desk2d", slow=True)
def _grad_model():
    cfg = desk_2d()
    errors = model_grad_errors(cfg, samples=2)
    bad = {k: v for k, v in errors.items() if not v <= GRAD_TOL}
    assert not bad, f"gradient mismatch in {len(bad)} tensors: {dict(list(bad.items())[:4])}"
    n = sum(p.size for p in DualTaskModel(cfg).parameters())
    return f"{len(errors)} tensors, {n} params, worst {max(errors.values()):.2e}"


# ---------------------------------------------------------------- token algebra


def _roundtrip(axes, window, channels=3, batch=2, seed=0) -> int:
    rng = np.random.default_rng(seed)
    shape = GridShape(tuple(axes), channels)
    x = rng.normal(size=(batch, shape.tokens, channels)).astype(np.float32)
    grid = TokenGrid(shape, Tensor(x))
    n = 0
    for shifted in (False, True):
        layout = make_layout(axes, window, shifted)
        back = window_reverse(window_partition(grid, layout), layout, shape)
        assert np.array_equal(back.tokens.data, x), f"round trip failed for {axes} window {window} shift {layout.shift}"
        n += 1
    return n


@check("windows.roundtrip_2d")
def _roundtrip_2d():
    cases = [((8, 8), (4, 4)), ((16, 16), (4, 4)), ((4, 8), (2, 4)), ((6, 6), (3, 3))]
    return f"{sum(_roundtrip(a, w) for a, w in cases)} partition/reverse round trips bit-exact"


@check("windows.roundtrip_3d")
def _roundtrip_3d():
    cases = [((4, 4, 4), (2, 2, 2)), ((8, 8, 8), (4, 4, 4)), ((2, 4, 8), (2, 2, 4))]
    return f"{sum(_roundtrip(a, w) for a, w in cases)} partition/reverse round trips bit-exact"


def brute_force_mask(axes, window, shift) -> np.ndarray:
    """Allowed pairs from first principles: two tokens of a cyclic window may
    attend iff their original positions fall in the same window of the
    non-cyclic grid offset by ``shift``."""
    nd = len(axes)
    nwin = [a // w for a, w in zip(axes, window)]
    t = prod(window)
    out = np.zeros((prod(nwin), t, t), dtype=np.float32)
    for wi, win in enumerate(itertools.product(*[range(n) for n in nwin])):
        ids = []
        for pos in itertools.product(*[range(w) for w in window]):
            shifted = [win[d] * window[d] + pos[d] for d in range(nd)]
            orig = [(shifted[d] + shift[d]) % axes[d] for d in range(nd)]
            ids.append(tuple((orig[d] - shift[d]) // window[d] for d in range(nd)))
        for i in range(t):
            for j in range(t):
                if ids[i] != ids[j]:
                    out[wi, i, j] = MASK_VALUE
    return out


def mask_cases():
    for n in range(2, 9):
        for w in range(2, n + 1):
            if n % w == 0 and w < n:
                yield (n, n), (w, w)
    yield (8, 4), (4, 2)
    yield (4, 4, 4), (2, 2, 2)
    yield (8, 8, 4), (4, 4, 2)
    yield (6, 6, 6), (3, 3, 3)


@check("windows.mask_oracle")
def _mask_oracle():
    n = 0
    for axes, window in mask_cases():
        layout = make_layout(axes, window, True)
        expected = brute_force_mask(axes, layout.window, layout.shift)
        assert np.array_equal(layout.mask, expected), f"mask mismatch on grid {axes} window {window}"
        n += 1
    return f"{n} grids (2D and 3D, <= 8 per axis) exact"


def _stage_arithmetic(cfg) -> int:
    rng = np.random.default_rng(0)
    n = 0
    shapes = cfg.level_shapes()
    for s, f in zip(shapes, cfg.merge_factors):
        c_cat, c_out = merge_channels(s.channels, f)
        assert c_cat == s.channels * prod(f) and c_out == 2 * s.channels
        x = TokenGrid(s, Tensor(rng.normal(size=(1, s.tokens, s.channels)).astype(np.float32)))
        m = patch_merge(x, f, Tensor(np.zeros((c_cat, c_out), np.float32)))
        assert m.shape.channels == c_out and m.shape.tokens == s.tokens // prod(f)
        c_lin, c_tok = expand_channels(m.shape.channels, f)
        assert c_lin == 2 * m.shape.channels and c_tok == c_lin // prod(f)
        e = patch_expand(m, f, Tensor(np.zeros((m.shape.channels, c_lin), np.float32)))
        assert e.shape.axes == s.axes and e.shape.channels == c_tok
        n += 1
    model = DualTaskModel(cfg, rng)
    out = model(Tensor(np.zeros((1,) + tuple(cfg.input_extents), np.float32)))
    got = [lvl.shape for lvl in out.features.levels]
    assert got == shapes, f"encoder levels {got} != {shapes}"
    assert out.gen_grid.shape == shapes[0] and out.cls_grid.shape == shapes[0]
    assert out.pred_scan.shape == (1,) + tuple(cfg.input_extents)
    return n


@check("patches.merge_expand_arithmetic")
def _merge_expand():
    n = _stage_arithmetic(desk_2d()) + _stage_arithmetic(desk_3d())
    return f"{n} stages checked in desk-2d and desk-3d"


# ---------------------------------------------------------------- attention


def _forward(cfg, seed=0, batch=2):
    rng = np.random.default_rng(seed)
    model = DualTaskModel(cfg, rng)
    x = rng.uniform(size=(batch,) + tuple(cfg.input_extents)).astype(np.float32)
    return model, x


@check("attention.row_sums")
def _row_sums():
    model, x = _forward(desk_2d())
    worst, n = 0.0, 0
    captured = []
    orig = T.softmax

    def spy(a, axis=-1):
        out = orig(a, axis)
        captured.append(out.data)
        return out

    import dtsw.attention as attention_mod

    attention_mod.softmax = spy
    try:
        model(Tensor(x))
    finally:
        attention_mod.softmax = orig
    for a in captured:
        worst = max(worst, float(np.abs(a.sum(axis=-1, dtype=np.float64) - 1.0).max()))
        n += 1
    assert n > 0, "no attention maps were produced"
    assert worst <= 1e-6, f"attention row sum off by {worst:.2e}"
    return f"{n} attention maps, max row error {worst:.1e}"


@contextlib.contextmanager
def record_follower_maps():
    """Capture the attention arrays the follower stream consumes."""
    seen = []
    orig = interactive.interactive_attention_follower

    def spy(attn, x_c, proj_c):
        seen.append(attn.values.data.copy())
        return orig(attn, x_c, proj_c)

    interactive.interactive_attention_follower = spy
    try:
        yield seen
    finally:
        interactive.interactive_attention_follower = orig


@check("interactive.bit_identical_maps")
def _bit_identical():
    model, x = _forward(desk_2d())
    with record_follower_maps() as seen:
        out = model(Tensor(x))
    produced = []
    for level in sorted(out.shared_maps, reverse=True):
        produced.extend(m.values.data for m in out.shared_maps[level])
    assert len(seen) == len(produced) == 2 * model.cfg.stages, f"{len(seen)} consumed vs {len(produced)} produced"
    for a, b in zip(produced, seen):
        assert a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes(), "follower map differs"
    return f"{len(seen)} maps consumed bit-identically"


@check("interactive.follower_zero_qk")
def _zero_qk():
    for ref in ("gen", "cls"):
        model, x = _forward(desk_2d(reference_task=ref))
        with count_projections() as counts:
            model(Tensor(x))
        fol_qk = sum(c for (role, kind), c in counts.items() if "follower" in role and kind in "qk")
        fol_v = sum(c for (role, kind), c in counts.items() if "follower" in role and kind == "v")
        ref_qk = sum(c for (role, kind), c in counts.items() if "reference" in role and kind in "qk")
        assert fol_qk == 0, f"follower computed {fol_qk} q/k projections (reference={ref})"
        assert fol_v == 2 * model.cfg.stages and ref_qk == 4 * model.cfg.stages
        for name in model.named_parameters():
            assert not ("fol_attn.q." in name or "fol_attn.k." in name), f"follower owns {name}"
    return "0 follower q/k projections for both reference tasks"


# ---------------------------------------------------------------- gradnorm


@check("gradnorm.fixed_point")
def _gn_fixed():
    w = TaskWeights(1.0, 1.0, 2.0, 2.0)
    for _ in range(50):
        w = gradnorm_update(w, 0.5 * w.w_gen, 0.5 * w.w_cls, 1.0, 1.0)
    assert abs(w.w_gen - 1.0) <= 1e-3 and abs(w.w_cls - 1.0) <= 1e-3, f"drifted to {w.w_gen}, {w.w_cls}"
    return f"symmetric tasks stay at ({w.w_gen:.6f}, {w.w_cls:.6f})"


def plateau_weights(steps: int = 100, seed: int = 0, decay: float = 0.95) -> list[TaskWeights]:
    """Generation loss decays geometrically while classification stalls.

    Both tasks see the same raw gradient scale (redrawn each step), so the
    weighted norms differ only through the weights.
    """
    rng = np.random.default_rng(seed)
    w = TaskWeights()
    out = []
    for i in range(steps):
        g = rng.uniform(0.5, 1.5)
        w = gradnorm_update(w, g * w.w_gen, g * w.w_cls, decay**i, 0.7)
        out.append(w)
    return out


@check("gradnorm.sum_and_plateau")
def _gn_plateau():
    hist = plateau_weights(decay=0.9)
    for w in hist:
        assert w.w_gen + w.w_cls == 2.0, f"weights sum to {w.w_gen + w.w_cls!r}"
        assert w.w_gen > 0 and w.w_cls > 0
    cls = [w.w_cls for w in hist]
    assert all(b >= a for a, b in zip(cls, cls[1:])), "lagging-task weight did not rise monotonically"
    assert cls[-1] > cls[0]
    # a slowly drifting target is tracked to within one sign step (lr * max raw norm)
    slow = [w.w_cls for w in plateau_weights(decay=0.99)]
    worst_drop = max(a - b for a, b in zip(slow, slow[1:]))
    assert slow[-1] > slow[0] + 0.3 and worst_drop <= 0.025 * 1.5, f"slow plateau: drop {worst_drop:.4f}"
    return f"w_cls {cls[0]:.3f} -> {cls[-1]:.3f} monotone over {len(cls)} updates, sums exactly 2"


# ---------------------------------------------------------------- metrics


def brute_auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


def brute_ssim(x, y, window=7, k1=0.01, k2=0.03, data_range=1.0) -> float:
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for corner in itertools.product(*[range(n - window + 1) for n in x.shape]):
        sl = tuple(slice(c, c + window) for c in corner)
        a, b = x[sl].ravel(), y[sl].ravel()
        ma, mb = a.mean(), b.mean()
        va, vb = ((a - ma) ** 2).mean(), ((b - mb) ** 2).mean()
        cov = ((a - ma) * (b - mb)).mean()
        vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


@check("metrics.auc_oracle")
def _auc_oracle():
    rng = np.random.default_rng(0)
    n = 0
    for size in (2, 5, 17, 64, 200):
        for _ in range(5):
            labels = rng.permutation(np.arange(size) % 2)
            scores = rng.integers(0, 6, size) / 5.0  # many ties
            assert auc(scores, labels) == brute_auc(scores, labels), f"auc mismatch at n={size}"
            n += 1
    return f"{n} random cases with ties equal the pairwise count exactly"


@check("metrics.psnr_ssim")
def _psnr_ssim():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(16, 16))
    p = psnr(np.clip(x, 0.2, 0.8) + 0.1, np.clip(x, 0.2, 0.8))
    assert abs(p - 20.0) <= 1e-6, f"psnr of a 0.1 offset is {p}"
    assert abs(ssim(x, x) - 1.0) <= 1e-6
    worst = 0.0
    for shape in ((8, 8), (12, 9), (8, 8, 8)):
        for _ in range(3):
            a, b = rng.uniform(size=shape), rng.uniform(size=shape)
            worst = max(worst, abs(ssim(a, b) - brute_ssim(a, b)))
    assert worst <= 1e-6, f"ssim differs from sliding-window oracle by {worst}"
    return f"psnr 20 dB case exact, ssim oracle error {worst:.1e}"


# ---------------------------------------------------------------- io and data


@check("io.checkpoint_rvol_roundtrip")
def _io():
    rng = np.random.default_rng(0)
    model = DualTaskModel(tiny_2d(), rng)
    ck = ckpt_io.Checkpoint(model.cfg.to_text(), model.state_arrays())
    back = ckpt_io.loads(ckpt_io.dumps(ck))
    assert back.config_text == ck.config_text and set(back.tensors) == set(ck.tensors)
    assert all(np.array_equal(back.tensors[k], ck.tensors[k]) for k in ck.tensors)
    vol = rng.uniform(size=(4, 5, 6)).astype(np.float32)
    assert np.array_equal(parse_rvol(rvol_bytes(vol)), vol)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "v.rvol"
        save_rvol(path, vol)
        assert np.array_equal(load_rvol(path), vol)
        ckpt_io.save(Path(tmp) / "m.ckpt", ck)
        again = DualTaskModel(tiny_2d(init_seed=5))
        again.load_arrays(ckpt_io.load(Path(tmp) / "m.ckpt").tensors)
        x = Tensor(rng.uniform(size=(1, 16, 16)).astype(np.float32))
        assert np.array_equal(again(x).pred_scan.data, model(x).pred_scan.data)
    return f"{len(ck.tensors)} tensors and an RVOL volume round-trip bit-exact"


@check("data.phantoms")
def _phantoms():
    pairs = make_phantoms(20, (64, 64), seed=3)
    assert sum(p.label for p in pairs) == 10
    assert all(check_label_consistency(p) for p in pairs)
    for p in pairs:
        assert p.initial.dtype == np.float32 and 0.0 <= p.initial.min() and p.followup.max() <= 1.0
    again = make_phantoms(20, (64, 64), seed=3)
    assert all(np.array_equal(a.followup, b.followup) for a, b in zip(pairs, again))
    small = make_phantoms(4, (32, 32, 32), seed=3)
    assert all(check_label_consistency(p) for p in small)
    return "labels balanced and consistent in 2D and 3D, generation deterministic"


@check("kernels.backends_agree")
def _backends():
    if not _kernels.HAS_NUMBA:
        return "numba unavailable; numpy kernels only"
    rng = np.random.default_rng(0)
    x = rng.normal(size=(37, 11))
    g = rng.normal(size=x.shape)
    gamma, beta = rng.normal(size=11), rng.normal(size=11)
    res = {}
    prev = _kernels.backend
    try:
        for name in ("numpy", "numba"):
            _kernels.use_backend(name)
            y = _kernels.softmax_fwd(x)
            ln = _kernels.layernorm_fwd(x, gamma, beta, 1e-5)
            gl, cdf = _kernels.gelu_fwd(x)
            res[name] = [y, _kernels.softmax_bwd(y, g), ln[0], *_kernels.layernorm_bwd(g, ln[1], ln[2], gamma),
                         gl, _kernels.gelu_bwd(x, cdf, g)]
    finally:
        _kernels.use_backend(prev)
    worst = max(float(np.abs(a - b).max()) for a, b in zip(res["numpy"], res["numba"]))
    assert worst <= 1e-10, f"numba and numpy kernels differ by {worst}"
    return f"numba and numpy kernels agree to {worst:.1e}"


# ---------------------------------------------------------------- runner


@contextlib.contextmanager
def broken_softmax_gradient():
    """Mutation hook: a softmax backward that drops the ``- sum(g*y)`` term."""
    orig = _kernels.softmax_bwd
    _kernels.softmax_bwd = lambda y, g: y * g
    try:
        yield
    finally:
        _kernels.softmax_bwd = orig


def run_suite(quick: bool = False, pattern: str | None = None, stream=None) -> SuiteResult:
    stream = sys.stdout if stream is None else stream
    suite = SuiteResult()
    for name, fn, slow in _CHECKS:
        if (quick and slow) or (pattern and pattern not in name):
            continue
        t0 = time.perf_counter()
        try:
            detail, ok = fn(), True
        except AssertionError as exc:
            detail, ok = str(exc) or "assertion failed", False
        except Exception as exc:  # a crash is a failed check, reported with its traceback tail
            detail, ok = f"{type(exc).__name__}: {exc} ({traceback.extract_tb(exc.__traceback__)[-1].line})", False
        res = CheckResult(name, ok, time.perf_counter() - t0, detail)
        suite.results.append(res)
        if stream is not None:
            print(f"{'PASS' if ok else 'FAIL'}  {name:34s} {res.seconds:7.2f}s  {detail}", file=stream, flush=True)
    if stream is not None:
        total = sum(r.seconds for r in suite.results)
        print(f"{len(suite.results) - len(suite.failed)}/{len(suite.results)} checks passed in {total:.1f}s",
              file=stream, flush=True)
    return suite
