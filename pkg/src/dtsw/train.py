"""Per-fold training with GradNorm task weighting and an adversarial critic,
checkpointing, resume, and evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import VolumePair, fold_split, random_crop
from .gradnorm import gradnorm_update
from .metrics import EvalReport, FoldResult, evaluate_predictions
from .model import Discriminator, DualTaskModel, ModelConfig, TaskWeights, compute_losses, discriminator_loss
from .optim import Adam, cosine_lr
from .tensor import Tape, Tensor, mul

log = logging.getLogger(__name__)

LOG_NAME = "train_log.tsv"
SCHEDULES = ("cosine", "constant")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    model: DualTaskModel
    disc: Discriminator
    opt: Adam
    disc_opt: Adam
    weights: TaskWeights
    step: int = 0
    best_val: float = math.inf
    disc_lr_ratio: float = 0.1


@dataclass
class StepRecord:
    step: int
    l_total: float
    l_gen: float
    l_cls: float
    l1: float
    adv: float
    d_loss: float
    w_gen: float
    w_cls: float
    g_gen: float
    g_cls: float
    grad_norm: float
    lr: float

    def line(self) -> str:
        return "\t".join(f"{f.name}={_fmt(getattr(self, f.name))}" for f in dataclasses.fields(self))


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6g}"


def new_state(cfg: ModelConfig, lr: float = 1e-3) -> TrainState:
    rng = np.random.default_rng(cfg.init_seed)
    model = DualTaskModel(cfg, rng)
    disc = Discriminator(rng, cfg)
    return TrainState(model, disc, Adam(model.named_parameters(), lr=lr), Adam(disc.named_parameters(), lr=lr),
                      TaskWeights())


def batch_indices(n: int, batch: int, seed: int, fold: int, step: int) -> np.ndarray:
    """Mini-batch for ``step``, a pure function of its arguments so a resumed run sees the same data."""
    rng = np.random.default_rng([seed, fold, step])
    return rng.choice(n, size=min(batch, n), replace=False)


def stack(pairs: list[VolumePair]):
    x = np.stack([p.initial for p in pairs]).astype(np.float32)
    y = np.stack([p.followup for p in pairs]).astype(np.float32)
    labels = np.array([p.label for p in pairs])
    return x, y, labels


def train_step(st: TrainState, x: np.ndarray, y: np.ndarray, labels: np.ndarray, *, gradnorm: bool = True,
               lr: float | None = None, clip: float = 0.0) -> StepRecord:
    """One transaction: forward, two backward passes (one per weighted task
    loss, to read each task's gradient norm on the shared layer), Adam on the
    model, a critic update on the detached prediction, then the GradNorm step."""
    cfg = st.model.cfg
    if lr is not None:
        st.opt.state.lr = lr
        st.disc_opt.state.lr = lr * st.disc_lr_ratio
    st.model.zero_grad()
    st.disc.zero_grad()
    w = st.weights
    with Tape() as tape:
        out = st.model(Tensor(x))
        L = compute_losses(out.pred_scan, y, out.probs, labels, st.disc, w, cfg.adv_weight)
        weighted_gen = mul(L.gen, w.w_gen)
        weighted_cls = mul(L.cls, w.w_cls)
    shared = st.model.shared_layer
    tape.backward(weighted_gen)
    g_gen_vec = tape.grad(shared).copy()
    tape.backward(weighted_cls)
    g_gen = float(np.linalg.norm(g_gen_vec))
    g_cls = float(np.linalg.norm(tape.grad(shared) - g_gen_vec))
    l_gen, l_cls = float(L.gen.data), float(L.cls.data)
    if not (math.isfinite(l_gen) and math.isfinite(l_cls)):
        raise TrainingDiverged(f"non-finite loss at step {st.step}: L_gen={l_gen} L_cls={l_cls}")
    grad_norm = st.opt.step(clip)

    d_loss = 0.0
    if cfg.adv_weight > 0:
        st.disc.zero_grad()
        fake = Tensor(out.pred_scan.data)
        with Tape() as dtape:
            dl = discriminator_loss(st.disc, y, fake)
        dtape.backward(dl)
        st.disc_opt.step(clip)
        d_loss = float(dl.data)

    rec = StepRecord(st.step, float(L.total.data), l_gen, l_cls, float(L.l1.data),
                     float(L.adv.data) if L.adv is not None else 0.0, d_loss, w.w_gen, w.w_cls, g_gen, g_cls,
                     grad_norm, st.opt.state.lr)
    if gradnorm:
        st.weights = gradnorm_update(w, g_gen, g_cls, l_gen, l_cls, cfg.gradnorm_alpha, cfg.gradnorm_lr)
    st.step += 1
    return rec


# ---------------------------------------------------------------- inference


def predict(model: DualTaskModel, pairs: list[VolumePair], batch: int = 8):
    """Clamped predicted follow-ups and class probabilities."""
    scans, probs = [], []
    for i in range(0, len(pairs), batch):
        x, _, _ = stack(pairs[i:i + batch])
        out = model(Tensor(x))
        scans.extend(np.clip(out.pred_scan.data, 0.0, 1.0))
        probs.append(out.probs.data)
    return scans, np.concatenate(probs)


def evaluate(model: DualTaskModel, pairs: list[VolumePair], fold: int = 0) -> FoldResult:
    scans, probs = predict(model, pairs)
    return evaluate_predictions(fold, scans, [p.followup for p in pairs], probs, [p.label for p in pairs])


def validation_loss(model: DualTaskModel, pairs: list[VolumePair]) -> float:
    """Mean L1 plus mean cross-entropy; used only to pick the best checkpoint."""
    scans, probs = predict(model, pairs)
    l1 = np.mean([np.abs(s - p.followup).mean() for s, p in zip(scans, pairs)])
    labels = np.array([p.label for p in pairs])
    ce = -np.mean(np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-12, None)))
    return float(l1 + ce)


# ---------------------------------------------------------------- checkpoints


def to_checkpoint(st: TrainState) -> ckpt_io.Checkpoint:
    t = dict(st.model.state_arrays())
    t.update({"disc." + k: p.data for k, p in st.disc.named_parameters().items()})
    for prefix, opt in (("adam.", st.opt), ("disc_adam.", st.disc_opt)):
        t.update({f"{prefix}m.{k}": v for k, v in opt.state.m.items()})
        t.update({f"{prefix}v.{k}": v for k, v in opt.state.v.items()})
        t[f"state.{prefix}step"] = np.array([opt.state.step], dtype=np.float32)
    w = st.weights
    scalars = {"step": st.step, "best_val": st.best_val, "w_gen": w.w_gen, "w_cls": w.w_cls,
               "initial_gen": w.initial_gen if w.initial_gen is not None else -1.0,
               "initial_cls": w.initial_cls if w.initial_cls is not None else -1.0}
    for k, v in scalars.items():
        t[f"state.{k}"] = np.array([v], dtype=np.float32)
    return ckpt_io.Checkpoint(st.model.cfg.to_text(), t)


def from_checkpoint(ck: ckpt_io.Checkpoint, lr: float = 1e-3, expect: ModelConfig | None = None) -> TrainState:
    cfg = ModelConfig.from_text(ck.config_text)
    if expect is not None and expect.to_text() != cfg.to_text():
        raise ValueError("checkpoint was written for a different model configuration")
    st = new_state(cfg, lr)
    params = {k: v for k, v in ck.tensors.items() if not k.startswith(("disc.", "adam.", "disc_adam.", "state."))}
    st.model.load_arrays(params)
    disc_params = st.disc.named_parameters()
    stored = ck.group("disc.")
    for k, p in disc_params.items():
        if k in stored:
            p.data = np.array(stored[k], dtype=p.data.dtype)
    for prefix, opt in (("adam.", st.opt), ("disc_adam.", st.disc_opt)):
        opt.state.m = {k: v.copy() for k, v in ck.group(prefix + "m.").items()}
        opt.state.v = {k: v.copy() for k, v in ck.group(prefix + "v.").items()}
        opt.state.step = int(ck.scalar(prefix + "step", 0))
    ig, ic = ck.scalar("initial_gen", -1.0), ck.scalar("initial_cls", -1.0)
    st.weights = TaskWeights(ck.scalar("w_gen", 1.0), ck.scalar("w_cls", 1.0),
                             ig if ig > 0 else None, ic if ic > 0 else None)
    st.step = int(ck.scalar("step", 0))
    st.best_val = ck.scalar("best_val", math.inf)
    return st


def load_model(path) -> DualTaskModel:
    return from_checkpoint(ckpt_io.load(path)).model


# ---------------------------------------------------------------- fold driver


@dataclass
class FoldRun:
    fold: int
    state: TrainState
    out_dir: Path
    records: list
    seconds: float


def split_validation(pairs: list[VolumePair], fraction: float, seed: int):
    """Stratified hold-out from the training pairs; with ``fraction`` 0 the training set doubles as validation."""
    if fraction <= 0 or len(pairs) < 4:
        return pairs, pairs
    k = min(len(pairs), max(2, int(round(1.0 / fraction))))
    val_idx = set(fold_split([p.label for p in pairs], k, seed)[0].tolist())
    train = [p for i, p in enumerate(pairs) if i not in val_idx]
    val = [p for i, p in enumerate(pairs) if i in val_idx]
    return train, val


def train_fold(cfg: ModelConfig, train_pairs: list[VolumePair], val_pairs: list[VolumePair], out_dir, *,
               steps: int, batch_size: int = 8, seed: int = 0, fold: int = 0, lr: float = 1e-3,
               eval_every: int = 100, crop=None, gradnorm: bool = True, clip: float = 1.0,
               schedule: str = "cosine", disc_lr_ratio: float = 0.1, resume=None, stop_at: int | None = None) -> FoldRun:
    """Train one fold, writing ``train_log.tsv``, ``best.ckpt`` and ``final.ckpt`` under ``out_dir``.

    ``schedule`` is ``"cosine"`` (decay from ``lr`` to zero over ``steps``)
    or ``"constant"``. The discriminator steps at ``disc_lr_ratio`` times the
    generator rate. ``stop_at`` ends the run early, saving ``step{N}.ckpt``
    instead of the final checkpoint, so a later call can resume from it.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"schedule must be one of {SCHEDULES}, got {schedule!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        st = from_checkpoint(ckpt_io.load(resume), lr, expect=cfg)
        log_mode = "a"
    else:
        st = new_state(cfg, lr)
        log_mode = "w"
    st.disc_lr_ratio = disc_lr_ratio
    records = []
    t0 = time.perf_counter()
    end = steps if stop_at is None else min(steps, stop_at)
    with open(out / LOG_NAME, log_mode) as logf:
        while st.step < end:
            idx = batch_indices(len(train_pairs), batch_size, seed, fold, st.step)
            batch = [train_pairs[i] for i in idx]
            if crop is not None:
                crop_seeds = np.random.SeedSequence([seed, fold, st.step]).generate_state(len(batch))
                batch = [random_crop(p, crop, int(s)) for p, s in zip(batch, crop_seeds)]
            x, y, labels = stack(batch)
            try:
                step_lr = cosine_lr(lr, st.step, steps) if schedule == "cosine" else lr
                rec = train_step(st, x, y, labels, gradnorm=gradnorm, lr=step_lr, clip=clip)
            except TrainingDiverged as exc:
                dump = out / f"nan_dump_step{st.step}.txt"
                dump.write_text(f"step={st.step}\nfold={fold}\nbatch_ids={','.join(p.id for p in batch)}\n"
                                f"batch_indices={','.join(str(int(i)) for i in idx)}\nerror={exc}\n")
                raise TrainingDiverged(f"{exc}; batch {[p.id for p in batch]} dumped to {dump}") from exc
            records.append(rec)
            logf.write(rec.line() + "\n")
            if eval_every and (st.step % eval_every == 0 or st.step == steps):
                v = validation_loss(st.model, val_pairs)
                if v < st.best_val:
                    st.best_val = v
                    ckpt_io.save(out / "best.ckpt", to_checkpoint(st))
                log.info("fold %d step %d L_gen %.4f L_cls %.4f val %.4f", fold, st.step, rec.l_gen, rec.l_cls, v)
    if stop_at is None or st.step >= steps:
        ckpt_io.save(out / "final.ckpt", to_checkpoint(st))
        if not (out / "best.ckpt").exists():
            ckpt_io.save(out / "best.ckpt", to_checkpoint(st))
    else:
        ckpt_io.save(out / f"step{st.step}.ckpt", to_checkpoint(st))
    return FoldRun(fold, st, out, records, time.perf_counter() - t0)


def cross_validate(cfg: ModelConfig, pairs: list[VolumePair], fold_of: list[int], folds, out_dir, *,
                   which: str = "final", val_fraction: float = 0.1, **train_kw) -> EvalReport:
    """Train on all but one fold, test on the held-out fold, for each requested fold.

    When every sample sits in a single fold there is nothing to hold out, so
    the run trains, validates and evaluates on the full set (the overfit
    setting).
    """
    results = []
    single = len(set(fold_of)) == 1
    for f in folds:
        train = list(pairs) if single else [p for p, k in zip(pairs, fold_of) if k != f]
        test = list(pairs) if single else [p for p, k in zip(pairs, fold_of) if k == f]
        if single:
            tr, val = train, train
        else:
            tr, val = split_validation(train, val_fraction, train_kw.get("seed", 0) + f)
        run = train_fold(cfg, tr, val, Path(out_dir) / f"fold{f}", fold=f, **train_kw)
        model = load_model(run.out_dir / f"{which}.ckpt")
        results.append(evaluate(model, test, f))
        log.info("fold %d: %s", f, results[-1])
    return EvalReport.from_folds(results)
