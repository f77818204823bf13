import io
import json
import shutil
import subprocess

import pytest

from dtsw.cli import main
from dtsw.data import MANIFEST, make_phantoms, read_manifest, save_rvol
from dtsw.verify import broken_softmax_gradient, run_suite


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    assert main(["gen-data", "--mode", "tiny", "--out", str(root / "data"), "--set", "n_samples=12",
                 "--set", "folds=2", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def tiny_run(tiny_data):
    out = tiny_data / "run"
    assert main(["train", "--mode", "tiny", "--data", str(tiny_data / "data"), "--out", str(out),
                 "--seed", "1", "--set", "folds=2", "--set", "fold=0", "--set", "steps=4",
                 "--set", "batch_size=2", "--set", "eval_every=2"]) == 0
    return out


def test_gen_data_default_counts_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--out", str(a), "--seed", "5"]) == 0
    assert main(["gen-data", "--out", str(b), "--seed", "5"]) == 0
    assert len(list(a.glob("*.rvol"))) == 400
    entries = read_manifest(a / MANIFEST)
    assert len(entries) == 200
    assert abs(sum(e.label for e in entries) - 100) <= 1
    assert sorted({e.fold for e in entries}) == [0, 1, 2, 3, 4]
    assert (a / MANIFEST).read_bytes() == (b / MANIFEST).read_bytes()
    assert (a / "ph0007_followup.rvol").read_bytes() == (b / "ph0007_followup.rvol").read_bytes()


def test_train_writes_artifacts(tiny_run):
    for name in ("run.cfg", "report.txt", "report.json", "fold0/train_log.tsv", "fold0/final.ckpt", "fold0/best.ckpt"):
        assert (tiny_run / name).exists(), name
    assert len((tiny_run / "fold0" / "train_log.tsv").read_text().splitlines()) == 4
    rep = json.loads((tiny_run / "report.json").read_text())
    assert rep["n_samples"] == 6


def test_eval_is_deterministic_and_complete(tiny_data, tiny_run, capsys):
    args = ["eval", "--mode", "tiny", "--data", str(tiny_data / "data"), "--out", str(tiny_run),
            "--set", "folds=2", "--set", "fold=0"]
    assert main(args + ["--report", str(tiny_data / "e1")]) == 0
    assert main(args + ["--report", str(tiny_data / "e2")]) == 0
    first = (tiny_data / "e1" / "report.txt").read_text()
    assert first == (tiny_data / "e2" / "report.txt").read_text()
    keys = [line.split("=")[0] for line in first.splitlines()[:8]]
    assert keys == ["psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "acc_mean", "acc_std", "auc_mean", "auc_std"]
    assert "PSNR" in capsys.readouterr().out


def test_eval_strict_detects_config_mismatch(tiny_data, tiny_run, capsys):
    ck = str(tiny_run / "fold0" / "final.ckpt")
    args = ["eval", "--mode", "tiny", "--seed", "1", "--data", str(tiny_data / "data"), "--strict", "--checkpoint", ck]
    assert main(args) == 0
    assert main(args + ["--no-interactive-attention"]) == 2
    assert "different model" in capsys.readouterr().err


def test_score_key_selects_checkpoint(tiny_data, tiny_run):
    args = ["eval", "--mode", "tiny", "--data", str(tiny_data / "data"), "--out", str(tiny_run),
            "--set", "folds=2", "--set", "fold=0"]
    assert main(args + ["--which", "best"]) == 0
    assert main(args + ["--set", "score=best"]) == 0
    with pytest.raises(SystemExit, match="score must be one of"):
        main(["train", "--mode", "tiny", "--data", str(tiny_data / "data"), "--out", str(tiny_data / "bad"),
              "--set", "folds=2", "--set", "score=median"])


def test_resume_continues_training(tiny_data, tiny_run):
    out = tiny_data / "resumed"
    shutil.copytree(tiny_run, out)
    assert main(["train", "--mode", "tiny", "--data", str(tiny_data / "data"), "--out", str(out),
                 "--seed", "1", "--set", "folds=2", "--set", "fold=0", "--set", "steps=6",
                 "--set", "batch_size=2", "--resume", str(out / "fold0" / "final.ckpt")]) == 0
    assert len((out / "fold0" / "train_log.tsv").read_text().splitlines()) == 6


def test_infer_writes_prediction(tiny_data, tiny_run, capsys):
    vol = make_phantoms(1, (16, 16), seed=9)[0].initial
    save_rvol(tiny_data / "in.rvol", vol)
    assert main(["infer", "--checkpoint", str(tiny_run / "fold0" / "final.ckpt"), "--input",
                 str(tiny_data / "in.rvol"), "--output", str(tiny_data / "out.rvol")]) == 0
    assert "p_hemorrhagic=" in capsys.readouterr().out
    assert (tiny_data / "out.rvol").stat().st_size == 12 + 8 + 16 * 16 * 4


@pytest.mark.parametrize("flag", [["--no-interactive-attention"], ["--reference-task", "cls"]])
def test_ablation_variants_train(tiny_data, flag, tmp_path):
    assert main(["train", "--mode", "tiny", "--data", str(tiny_data / "data"), "--out", str(tmp_path),
                 "--set", "folds=2", "--set", "fold=1", "--set", "steps=2", "--set", "batch_size=2"] + flag) == 0
    assert (tmp_path / "report.json").exists()


def test_errors_exit_nonzero(tmp_path, capsys):
    with pytest.raises(SystemExit):
        main(["train", "--mode", "tiny", "--data", str(tmp_path / "missing")])
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--set", "steps=abc"]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_verify_exit_codes(capsys):
    assert main(["verify", "--only", "windows.roundtrip_2d"]) == 0
    out = capsys.readouterr().out
    assert out.split()[:2] == ["PASS", "windows.roundtrip_2d"]


def test_broken_softmax_gradient_fails_suite():
    buf = io.StringIO()
    with broken_softmax_gradient():
        result = run_suite(quick=True, pattern="grad.primitives", stream=buf)
    assert not result.ok
    assert buf.getvalue().split()[:2] == ["FAIL", "grad.primitives"]
    assert run_suite(quick=True, pattern="grad.primitives", stream=io.StringIO()).ok


def test_console_script_installed():
    exe = shutil.which("dtsw")
    assert exe is not None
    out = subprocess.run([exe, "--help"], capture_output=True, text=True, check=True).stdout
    for verb in ("gen-data", "train", "eval", "verify", "infer"):
        assert verb in out
