"""Image fidelity (PSNR, SSIM) and classification (accuracy, AUC) metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.stats import rankdata

PSNR_CAP = 99.0
SSIM_WINDOW = 7
K1 = 0.01
K2 = 0.03


def psnr(pred, target, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); identical inputs report ``PSNR_CAP``."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"psnr: shapes {p.shape} and {t.shape} differ")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range**2 / mse))


def ssim(pred, target, window: int = SSIM_WINDOW, k1: float = K1, k2: float = K2, data_range: float = 1.0) -> float:
    """Mean SSIM over every position where a ``window``-wide cube fits.

    Local statistics use a uniform filter and population (1/N) moments.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if min(x.shape) < window:
        raise ValueError(f"ssim: volume {x.shape} smaller than window {window}")
    h = window // 2
    valid = tuple(slice(h, n - (window - 1 - h)) for n in x.shape)

    def local(a):
        return uniform_filter(a, size=window, mode="constant")[valid]

    mx, my = local(x), local(y)
    vx = local(x * x) - mx * mx
    vy = local(y * y) - my * my
    cxy = local(x * y) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def accuracy(pred_labels, true_labels) -> float:
    p = np.asarray(pred_labels)
    t = np.asarray(true_labels)
    if p.shape != t.shape:
        raise ValueError(f"accuracy: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == t))


def auc(scores, true_labels) -> float:
    """Mann-Whitney AUC from average ranks; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(true_labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------- reports


@dataclass
class FoldResult:
    fold: int
    n: int
    psnr: list
    ssim: list
    acc: float
    auc: float | None


def evaluate_predictions(fold: int, pred_scans, true_scans, probs, labels) -> FoldResult:
    """Per-sample fidelity plus fold-level classification metrics.

    ``probs`` is (n, classes); the AUC score is the hemorrhagic probability.
    AUC is ``None`` when the fold holds a single class.
    """
    preds = [np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0) for p in pred_scans]
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    ps = [psnr(p, t) for p, t in zip(preds, true_scans)]
    ss = [ssim(p, t) for p, t in zip(preds, true_scans)]
    acc = accuracy(probs.argmax(axis=1), labels)
    a = auc(probs[:, 1], labels) if len(np.unique(labels)) == 2 else None
    return FoldResult(fold, len(labels), ps, ss, acc, a)


@dataclass
class EvalReport:
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    acc_mean: float
    acc_std: float
    auc_mean: float
    auc_std: float
    n_samples: int
    folds: list = field(default_factory=list)

    AGGREGATE_KEYS = ("psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "acc_mean", "acc_std", "auc_mean", "auc_std")

    @classmethod
    def from_folds(cls, folds: list[FoldResult]) -> "EvalReport":
        """PSNR/SSIM pooled over samples; ACC/AUC mean and std over folds."""
        if not folds:
            raise ValueError("no folds to aggregate")
        ps = np.concatenate([f.psnr for f in folds])
        ss = np.concatenate([f.ssim for f in folds])
        accs = np.array([f.acc for f in folds])
        aucs = np.array([f.auc for f in folds if f.auc is not None])
        return cls(
            float(ps.mean()), float(ps.std()), float(ss.mean()), float(ss.std()),
            float(accs.mean()), float(accs.std()),
            float(aucs.mean()) if aucs.size else float("nan"), float(aucs.std()) if aucs.size else float("nan"),
            int(sum(f.n for f in folds)), list(folds),
        )

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.AGGREGATE_KEYS}
        out["n_samples"] = self.n_samples
        out["folds"] = [
            {"fold": f.fold, "n": f.n, "psnr": float(np.mean(f.psnr)), "ssim": float(np.mean(f.ssim)),
             "acc": f.acc, "auc": f.auc}
            for f in self.folds
        ]
        return out

    def to_text(self) -> str:
        d = self.to_dict()
        lines = [f"{k}={d[k]:.6f}" for k in self.AGGREGATE_KEYS]
        lines.append(f"n_samples={self.n_samples}")
        for f in d["folds"]:
            for k in ("n", "psnr", "ssim", "acc", "auc"):
                v = f[k]
                lines.append(f"fold{f['fold']}.{k}={'nan' if v is None else (v if k == 'n' else f'{v:.6f}')}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        shown = min(1.0, max(0.0, self.ssim_mean))
        return (f"PSNR {self.psnr_mean:.2f}±{self.psnr_std:.2f} dB  SSIM {100 * shown:.2f}%  "
                f"ACC {self.acc_mean:.4f}  AUC {self.auc_mean:.4f}  (n={self.n_samples})")
