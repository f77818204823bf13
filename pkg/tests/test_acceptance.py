"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Criteria 6 and 7 train the desk-2d model for real (about 10 and 45 minutes on
one CPU core); deselect them with ``-m "not slow"``.
"""

import io
import json
import time

import numpy as np
import pytest

from dtsw.cli import main
from dtsw.data import load_dataset
from dtsw.model import desk_2d, tiny_2d
from dtsw.train import load_model, predict
from dtsw.verify import GRAD_TOL, model_grad_errors, primitive_errors, run_suite


def suite(pattern):
    buf = io.StringIO()
    res = run_suite(pattern=pattern, stream=buf)
    return res, buf.getvalue()


def summary(res):
    return "; ".join(f"{r.name} {'ok' if r.ok else 'FAILED ' + r.detail}" for r in res.results)


def test_criterion_1_gradient_suite(criterion):
    t0 = time.perf_counter()
    prim = primitive_errors(0)
    desk = model_grad_errors(desk_2d(), samples=2)
    tiny = model_grad_errors(tiny_2d(), samples=8)
    elapsed = time.perf_counter() - t0
    worst = max(max(prim.values()), max(desk.values()), max(tiny.values()))
    ok = worst <= GRAD_TOL and elapsed < 120
    criterion("criterion 1 (gradient suite)", ok,
              f"{len(prim)} primitives, desk-2d {len(desk)} tensors, <=10k variant {len(tiny)} tensors, "
              f"worst rel err {worst:.2e}, {elapsed:.0f}s")


def test_criterion_2_token_algebra(criterion):
    names = ("windows.roundtrip_2d", "windows.roundtrip_3d", "windows.mask_oracle", "patches.merge_expand")
    results = [suite(n)[0] for n in names]
    ok = all(r.ok and r.results for r in results)
    criterion("criterion 2 (token algebra)", ok, " | ".join(summary(r) for r in results))


def test_criterion_3_attention_invariants(criterion):
    results = [suite(n)[0] for n in ("attention.row_sums", "interactive.bit_identical", "interactive.follower_zero")]
    ok = all(r.ok and r.results for r in results)
    criterion("criterion 3 (attention invariants)", ok,
              " | ".join(f"{r.results[0].name}: {r.results[0].detail}" for r in results))


def test_criterion_4_gradnorm(criterion):
    results = [suite(n)[0] for n in ("gradnorm.fixed_point", "gradnorm.sum_and_plateau")]
    ok = all(r.ok and r.results for r in results)
    criterion("criterion 4 (GradNorm)", ok, " | ".join(r.results[0].detail for r in results))


def test_criterion_5_metric_oracles(criterion):
    results = [suite(n)[0] for n in ("metrics.auc_oracle", "metrics.psnr_ssim")]
    ok = all(r.ok and r.results for r in results)
    criterion("criterion 5 (metric oracles)", ok, " | ".join(r.results[0].detail for r in results))


# ---------------------------------------------------------------- training runs


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    data, run = root / "data", root / "run"
    assert main(["gen-data", "--out", str(data), "--seed", "7", "--set", "n_samples=8", "--set", "folds=1"]) == 0
    t0 = time.perf_counter()
    code = main(["train", "--data", str(data), "--out", str(run), "--seed", "7", "--set", "folds=1",
                 "--set", "steps=2000"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return data, run, elapsed


@pytest.mark.slow
def test_criterion_6_overfit(criterion, overfit):
    _, run, elapsed = overfit
    rep = json.loads((run / "report.json").read_text())
    ok = rep["psnr_mean"] >= 30.0 and rep["acc_mean"] == 1.0 and elapsed < 30 * 60
    criterion("criterion 6 (overfit 8 pairs)", ok,
              f"train PSNR {rep['psnr_mean']:.2f} dB (>= 30), ACC {rep['acc_mean']:.3f} (== 1), {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_overfit_final_train_l1(criterion, overfit):
    data, run, _ = overfit
    pairs, _ = load_dataset(data)
    scans, _ = predict(load_model(run / "fold0" / "final.ckpt"), pairs)
    l1 = float(np.mean([np.abs(s - p.followup).mean() for s, p in zip(scans, pairs)]))
    criterion("overfit final train L1", l1 < 0.02, f"mean L1 {l1:.4f} (< 0.02)")


@pytest.mark.slow
def test_criterion_7_generalization(criterion, tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--out", str(data), "--seed", "0"]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--data", str(data), "--out", str(run), "--seed", "0"]) == 0
    rep = json.loads((run / "report.json").read_text())
    ok = rep["acc_mean"] >= 0.9 and rep["auc_mean"] >= 0.95
    criterion("criterion 7 (five-fold generalization)", ok,
              f"held-out ACC {rep['acc_mean']:.3f} (>= 0.9), AUC {rep['auc_mean']:.3f} (>= 0.95), "
              f"PSNR {rep['psnr_mean']:.2f} dB, {(time.perf_counter() - t0) / 60:.1f} min")


def test_criterion_8_ablation_harness(criterion, tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--seed", "3", "--set", "n_samples=20", "--set", "folds=2"]) == 0
    variants = {"interactive": [], "no-interactive": ["--no-interactive-attention"],
                "cls-reference": ["--reference-task", "cls"]}
    reports = {}
    for name, flags in variants.items():
        run = tmp_path / name
        code = main(["train", "--data", str(data), "--out", str(run), "--seed", "3", "--set", "folds=2",
                     "--set", "fold=0", "--set", "steps=30", "--set", "eval_every=10"] + flags)
        assert code == 0, name
        reports[name] = json.loads((run / "report.json").read_text())
    keys = {name: sorted(r) for name, r in reports.items()}
    ok = len({tuple(k) for k in keys.values()}) == 1 and all(r["n_samples"] == 10 for r in reports.values())
    ordering = ", ".join(f"{n}: PSNR {r['psnr_mean']:.2f} ACC {r['acc_mean']:.2f}" for n, r in reports.items())
    criterion("criterion 8 (ablation harness)", ok, f"3 variants trained one fold, same report keys; {ordering}")
