"""Run configuration: line-oriented ``key=value`` text with ``#`` comments.

Keys prefixed ``model.`` override :class:`~dtsw.model.ModelConfig` fields;
the rest map onto :class:`RunConfig`. Command-line flags are applied on top.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig, desk_2d, desk_3d, tiny_2d

PROFILES = {"2d": desk_2d, "3d": desk_3d, "tiny": tiny_2d}


@dataclass
class RunConfig:
    mode: str = "2d"
    data_dir: str = "data"
    out_dir: str = "runs"
    n_samples: int = 200
    folds: int = 5
    fold: str = "all"
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    lr: float = 1e-3
    val_fraction: float = 0.1
    eval_every: int = 100
    crop: str = ""
    gradnorm: bool = True
    clip: float = 1.0
    disc_lr_ratio: float = 0.1
    score: str = "final"
    schedule: str = "cosine"
    jitter: float = 0.0
    model: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        if self.mode not in PROFILES:
            raise ValueError(f"mode must be one of {sorted(PROFILES)}, got {self.mode!r}")
        kv = {"init_seed": str(self.seed), **self.model}
        return ModelConfig.from_kv(kv, PROFILES[self.mode]())

    def fold_indices(self) -> list[int]:
        if self.folds < 1:
            raise ValueError(f"folds must be >= 1, got {self.folds}")
        if self.fold == "all":
            return list(range(self.folds))
        out = [int(f) for f in str(self.fold).split(",") if f.strip()]
        if any(not 0 <= f < self.folds for f in out):
            raise ValueError(f"fold {self.fold!r} outside 0..{self.folds - 1}")
        return out

    def crop_extents(self) -> tuple | None:
        return tuple(int(c) for c in self.crop.split("x")) if self.crop else None

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name != "model":
                lines.append(f"{f.name}={_fmt(getattr(self, f.name))}")
        lines += [f"model.{k}={v}" for k, v in sorted(self.model.items())]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, value: str, default):
    if isinstance(default, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{source}:{n}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def apply(cfg: RunConfig, kv: dict) -> RunConfig:
    """Return a copy of ``cfg`` with string overrides applied."""
    cfg = dataclasses.replace(cfg, model=dict(cfg.model))
    defaults = {f.name: getattr(RunConfig(), f.name) for f in dataclasses.fields(RunConfig)}
    for key, value in kv.items():
        if key.startswith("model."):
            cfg.model[key[len("model."):]] = value
        elif key in defaults and key != "model":
            setattr(cfg, key, _coerce(key, value, defaults[key]))
        else:
            raise KeyError(f"unknown config key {key!r}")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = apply(cfg, parse_kv(Path(path).read_text(), str(path)))
    if overrides:
        cfg = apply(cfg, overrides)
    cfg.model_config().validate()
    return cfg
