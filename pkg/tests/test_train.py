import numpy as np
import pytest

from dtsw import checkpoint as ck
from dtsw.data import VolumePair, make_phantoms
from dtsw.model import desk_2d, tiny_2d
from dtsw.optim import cosine_lr
from dtsw.train import (
    LOG_NAME,
    TrainingDiverged,
    batch_indices,
    cross_validate,
    load_model,
    split_validation,
    train_fold,
)

CFG = tiny_2d()


@pytest.fixture(scope="module")
def pairs():
    return make_phantoms(8, CFG.input_extents, seed=0)


def run(pairs, out, steps=6, **kw):
    kw.setdefault("eval_every", 2)
    return train_fold(CFG, pairs, pairs, out, steps=steps, batch_size=4, seed=3, **kw)


def test_log_has_one_line_per_step(pairs, tmp_path):
    r = run(pairs, tmp_path)
    lines = (tmp_path / LOG_NAME).read_text().splitlines()
    assert len(lines) == 6 == len(r.records)
    fields = dict(kv.split("=") for kv in lines[0].split("\t"))
    for key in ("step", "l_gen", "l_cls", "w_gen", "w_cls", "g_gen", "g_cls"):
        assert key in fields
    assert (tmp_path / "final.ckpt").exists() and (tmp_path / "best.ckpt").exists()


def test_weights_sum_to_two_and_lr_follows_cosine(pairs, tmp_path):
    r = run(pairs, tmp_path)
    for rec in r.records:
        assert rec.w_gen + rec.w_cls == pytest.approx(2.0, abs=1e-12)
        assert rec.lr == pytest.approx(cosine_lr(1e-3, rec.step, 6))
    assert r.records[0].w_gen == 1.0
    assert r.records[-1].w_gen != 1.0


def test_gradnorm_off_keeps_unit_weights(pairs, tmp_path):
    r = run(pairs, tmp_path, gradnorm=False, schedule="constant")
    assert all(rec.w_gen == 1.0 == rec.w_cls and rec.lr == 1e-3 for rec in r.records)


def test_seeded_runs_are_bit_identical(pairs, tmp_path):
    run(pairs, tmp_path / "a")
    run(pairs, tmp_path / "b")
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / LOG_NAME).read_text() == (tmp_path / "b" / LOG_NAME).read_text()


def test_resume_reproduces_uninterrupted_run(pairs, tmp_path):
    full = run(pairs, tmp_path / "full")
    part = run(pairs, tmp_path / "part", stop_at=3)
    assert len(part.records) == 3 and (tmp_path / "part" / "step3.ckpt").exists()
    rest = run(pairs, tmp_path / "part", resume=tmp_path / "part" / "step3.ckpt")
    assert [r.step for r in rest.records] == [3, 4, 5]
    for a, b in zip(full.records[3:], rest.records):
        assert b.l_total == pytest.approx(a.l_total, abs=1e-5)
        assert b.l_gen == pytest.approx(a.l_gen, abs=1e-5)
    assert len((tmp_path / "part" / LOG_NAME).read_text().splitlines()) == 6


def test_resume_rejects_other_config(pairs, tmp_path):
    run(pairs, tmp_path, stop_at=1)
    with pytest.raises(ValueError, match="different model"):
        train_fold(desk_2d(), pairs, pairs, tmp_path, steps=2, resume=tmp_path / "step1.ckpt")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_batch_dump(pairs, tmp_path):
    bad = [VolumePair(np.full(CFG.input_extents, np.nan, np.float32), p.followup, p.label, f"bad{i}")
           for i, p in enumerate(pairs[:4])]
    with pytest.raises(TrainingDiverged, match="bad"):
        train_fold(CFG, bad, bad, tmp_path, steps=2, batch_size=4)
    dump = (tmp_path / "nan_dump_step0.txt").read_text()
    assert "batch_ids=" in dump and "bad0" in dump


def test_unknown_schedule(pairs, tmp_path):
    with pytest.raises(ValueError):
        run(pairs, tmp_path, schedule="step")


def test_crop_training_runs(tmp_path):
    big = make_phantoms(4, (24, 24), seed=1)
    r = train_fold(CFG, big, big[:1], tmp_path, steps=2, batch_size=2, crop=(16, 16), eval_every=0)
    assert len(r.records) == 2


def test_batch_indices_pure():
    a = batch_indices(10, 4, 1, 2, 3)
    assert np.array_equal(a, batch_indices(10, 4, 1, 2, 3))
    assert len(set(a.tolist())) == 4
    assert len(batch_indices(3, 4, 0, 0, 0)) == 3


def test_split_validation_is_stratified_and_disjoint(pairs):
    many = make_phantoms(20, CFG.input_extents, seed=2)
    tr, val = split_validation(many, 0.2, 0)
    assert len(tr) + len(val) == 20 and not {p.id for p in tr} & {p.id for p in val}
    assert sum(p.label for p in val) == len(val) // 2
    assert split_validation(pairs, 0.0, 0) == (pairs, pairs)


def test_cross_validate_two_folds(tmp_path):
    many = make_phantoms(8, CFG.input_extents, seed=4)
    rep = cross_validate(CFG, many, [i % 2 for i in range(8)], [0, 1], tmp_path, steps=2, batch_size=2,
                         eval_every=1)
    assert rep.n_samples == 8 and len(rep.folds) == 2
    assert load_model(tmp_path / "fold1" / "final.ckpt").cfg == CFG


def test_cross_validate_single_fold_uses_all_pairs(pairs, tmp_path):
    rep = cross_validate(CFG, pairs, [0] * len(pairs), [0], tmp_path, steps=1, batch_size=2, val_fraction=0.0)
    assert rep.n_samples == len(pairs)
    assert ck.load(tmp_path / "fold0" / "final.ckpt").scalar("step") == 1
