"""Synthetic hemorrhage phantoms, RVOL volume files, normalisation, cropping
and stratified fold assignment."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from math import prod
from pathlib import Path
from typing import Callable

import numpy as np

NON_HEMORRHAGIC = 0
HEMORRHAGIC = 1

TISSUE_MEAN = 0.3
NOISE_STD = 0.02
NOISE_BOUND = 2.5
BLOB_INTENSITY = 0.8
SKULL_INTENSITY = 1.0
HIGH_DENSITY = 0.55
CONSISTENCY_THRESHOLD = 4

RVOL_MAGIC = b"RVOL0001"
_MAX_RANK = 8


class FormatError(ValueError):
    """Malformed or truncated RVOL file."""


class SpecError(ValueError):
    """Phantom geometry that violates its own invariants."""


@dataclass
class VolumePair:
    initial: np.ndarray
    followup: np.ndarray
    label: int
    id: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.initial.shape != self.followup.shape:
            raise ValueError(f"initial {self.initial.shape} and followup {self.followup.shape} differ")


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple
    center: tuple
    radii: tuple
    label: int
    blob_center: tuple | None = None
    blob_radius: float = 0.0
    growth: float = 1.0
    skull: float = 2.0
    tissue: float = TISSUE_MEAN
    noise: float = NOISE_STD
    blob_intensity: float = BLOB_INTENSITY

    def validate(self) -> None:
        nd = len(self.extents)
        if len(self.center) != nd or len(self.radii) != nd:
            raise SpecError("center/radii rank does not match extents")
        if self.label not in (NON_HEMORRHAGIC, HEMORRHAGIC):
            raise SpecError(f"label must be 0 or 1, got {self.label}")
        if (self.growth > 1.0) != (self.label == HEMORRHAGIC):
            raise SpecError(f"growth {self.growth} inconsistent with label {self.label}")
        if self.label == HEMORRHAGIC:
            if self.blob_center is None or self.blob_radius <= 0:
                raise SpecError("hemorrhagic phantom needs a blob")
            brain = _ellipsoid(self.extents, self.center, self.radii) <= 1.0
            grown = _ball(self.extents, self.blob_center, self.blob_radius * self.growth)
            if not grown.any() or (grown & ~brain).any():
                raise SpecError("hemorrhage blob extends outside the brain ellipsoid")
        outer = _ellipsoid(self.extents, self.center, tuple(r + self.skull for r in self.radii))
        edge = np.ones(self.extents, dtype=bool)
        edge[tuple(slice(1, -1) for _ in self.extents)] = False
        if (outer[edge] <= 1.0).any():
            raise SpecError("skull shell touches the volume border")


def _grid(extents):
    return np.indices(extents, dtype=np.float64)


def _ellipsoid(extents, center, radii) -> np.ndarray:
    g = _grid(extents)
    return sum(((g[i] - center[i]) / radii[i]) ** 2 for i in range(len(extents)))


def _ball(extents, center, radius) -> np.ndarray:
    g = _grid(extents)
    return sum((g[i] - center[i]) ** 2 for i in range(len(extents))) <= radius**2


def _bounded_noise(rng: np.random.Generator, std: float, n: int, bound: float = NOISE_BOUND) -> np.ndarray:
    """Gaussian noise redrawn wherever it falls beyond ``bound`` standard deviations."""
    out = rng.normal(0.0, std, size=n)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def _render(spec: PhantomSpec, blob_radius: float, rng: np.random.Generator) -> np.ndarray:
    inner = _ellipsoid(spec.extents, spec.center, spec.radii)
    outer = _ellipsoid(spec.extents, spec.center, tuple(r + spec.skull for r in spec.radii))
    vol = np.zeros(spec.extents, dtype=np.float64)
    brain = inner <= 1.0
    vol[(outer <= 1.0) & ~brain] = SKULL_INTENSITY
    vol[brain] = spec.tissue
    if blob_radius > 0:
        vol[_ball(spec.extents, spec.blob_center, blob_radius) & brain] = spec.blob_intensity
    vol[brain] += _bounded_noise(rng, spec.noise, int(brain.sum()))
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def high_density_count(vol: np.ndarray) -> int:
    """Voxels above the hemorrhage threshold, excluding the skull level."""
    return int(((vol > HIGH_DENSITY) & (vol < SKULL_INTENSITY - 0.05)).sum())


def synth_phantom_pair(spec: PhantomSpec, seed: int, sample_id: str = "") -> VolumePair:
    """Render initial and follow-up scans; the follow-up blob radius is ``growth`` times larger."""
    spec.validate()
    rng = np.random.default_rng(seed)
    r0 = spec.blob_radius if spec.label == HEMORRHAGIC else 0.0
    initial = _render(spec, r0, rng)
    followup = _render(spec, r0 * spec.growth, rng)
    return VolumePair(initial, followup, spec.label, sample_id, seed)


def sample_phantom_spec(extents, label: int, rng: np.random.Generator, jitter: float = 0.0) -> PhantomSpec:
    """Brain ellipsoid with, for hemorrhagic samples, a blob that fits once grown.

    With ``jitter`` 0 every brain sits on the same template (as after
    registration); ``jitter`` 1 moves the centre by up to 1.5 voxels and
    scales the radii by up to +-9%.
    """
    extents = tuple(int(e) for e in extents)
    center = tuple(e / 2 - 0.5 + jitter * rng.uniform(-1.5, 1.5) for e in extents)
    radii = tuple(e * (0.33 + jitter * rng.uniform(-0.03, 0.03)) for e in extents)
    if label != HEMORRHAGIC:
        return PhantomSpec(extents, center, radii, NON_HEMORRHAGIC)
    growth = float(rng.uniform(1.5, 2.0))
    r_fit = (min(radii) - 1.5) / (growth + 0.6)
    radius = float(rng.uniform(2.0, max(2.0, min(6.0, r_fit))))
    # keep the grown blob inside the ellipsoid: offset bounded by the slack
    slack = min(radii) - radius * growth - 1.0
    direction = rng.normal(size=len(extents))
    direction /= np.linalg.norm(direction)
    offset = direction * rng.uniform(0.0, max(slack, 0.0))
    blob = tuple(float(c + o) for c, o in zip(center, offset))
    return PhantomSpec(extents, center, radii, HEMORRHAGIC, blob, radius, growth)


def check_label_consistency(pair: VolumePair, threshold: int = CONSISTENCY_THRESHOLD) -> bool:
    grew = high_density_count(pair.followup) > high_density_count(pair.initial) + threshold
    return grew == (pair.label == HEMORRHAGIC)


def make_phantoms(n: int, extents, seed: int, jitter: float = 0.0) -> list[VolumePair]:
    """``n`` phantoms, half of them hemorrhagic (the odd one out is not)."""
    root = np.random.SeedSequence(seed)
    labels = np.array([HEMORRHAGIC] * (n // 2) + [NON_HEMORRHAGIC] * (n - n // 2))
    np.random.default_rng(root.spawn(1)[0]).shuffle(labels)
    pairs = []
    for i, (label, child) in enumerate(zip(labels, root.spawn(n))):
        rng = np.random.default_rng(child)
        spec = sample_phantom_spec(extents, int(label), rng, jitter)
        pair = synth_phantom_pair(spec, int(rng.integers(2**31)), f"ph{i:04d}")
        if not check_label_consistency(pair):
            raise SpecError(f"phantom {pair.id} violates the label rule")
        pairs.append(pair)
    return pairs


# ---------------------------------------------------------------- transforms


def min_max_normalize(volume: np.ndarray) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("volume contains non-finite values")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.float32)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def random_crop(pair: VolumePair, crop, seed: int) -> VolumePair:
    """Cut the same random window out of both scans."""
    crop = tuple(int(c) for c in crop)
    shape = pair.initial.shape
    if len(crop) != len(shape) or any(c > s or c < 1 for c, s in zip(crop, shape)):
        raise ValueError(f"crop {crop} does not fit volume {shape}")
    rng = np.random.default_rng(seed)
    start = [int(rng.integers(0, s - c + 1)) for s, c in zip(shape, crop)]
    window = tuple(slice(a, a + c) for a, c in zip(start, crop))
    return dataclasses.replace(pair, initial=pair.initial[window].copy(), followup=pair.followup[window].copy())


def identity_align(pair: VolumePair) -> VolumePair:
    """Registration hook. Phantoms are generated aligned, so this is a no-op."""
    return pair


def preprocess(pair: VolumePair, align: Callable[[VolumePair], VolumePair] = identity_align) -> VolumePair:
    pair = align(pair)
    return dataclasses.replace(pair, initial=min_max_normalize(pair.initial),
                               followup=min_max_normalize(pair.followup))


# ---------------------------------------------------------------- folds


def fold_split(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Stratified k-fold partition of sample indices.

    ``labels`` is a label vector, or a sample count for an unstratified
    split. Fold sizes differ by at most one, as do per-class counts.
    """
    labels = np.zeros(labels, dtype=int) if np.isscalar(labels) else np.asarray(labels)
    n = len(labels)
    if k < 2 or n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    assign = np.empty(n, dtype=int)
    assign[order] = np.arange(n) % k
    return [np.flatnonzero(assign == f) for f in range(k)]


# ---------------------------------------------------------------- RVOL I/O


def rvol_bytes(volume: np.ndarray) -> bytes:
    vol = np.asarray(volume)
    if vol.ndim == 0 or vol.ndim > _MAX_RANK or 0 in vol.shape:
        raise ValueError(f"cannot store volume of shape {vol.shape}")
    if any(e >= 2**32 for e in vol.shape):
        raise ValueError(f"extent overflow in {vol.shape}")
    head = RVOL_MAGIC + struct.pack(f"<I{vol.ndim}I", vol.ndim, *vol.shape)
    return head + np.ascontiguousarray(vol, dtype="<f4").tobytes()


def parse_rvol(data: bytes) -> np.ndarray:
    if len(data) < 12 or data[:8] != RVOL_MAGIC:
        raise FormatError("bad magic: not an RVOL0001 volume")
    (rank,) = struct.unpack_from("<I", data, 8)
    if not 1 <= rank <= _MAX_RANK:
        raise FormatError(f"implausible rank {rank}")
    if len(data) < 12 + 4 * rank:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", data, 12)
    count = prod(shape)
    body = len(data) - 12 - 4 * rank
    if count == 0 or count * 4 != body:
        raise FormatError(f"extents {shape} need {count * 4} data bytes, file has {body}")
    return np.frombuffer(data, dtype="<f4", offset=12 + 4 * rank).reshape(shape).astype(np.float32)


def save_rvol(path, volume: np.ndarray) -> None:
    Path(path).write_bytes(rvol_bytes(volume))


def load_rvol(path) -> np.ndarray:
    return parse_rvol(Path(path).read_bytes())


# ---------------------------------------------------------------- dataset


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    initial: str
    followup: str
    label: int
    fold: int

    def line(self) -> str:
        return f"{self.id}\t{self.initial}\t{self.followup}\t{self.label}\t{self.fold}"


MANIFEST = "manifest.tsv"


def write_dataset(out_dir, pairs: list[VolumePair], k: int = 5, seed: int = 0) -> list[ManifestEntry]:
    """Write RVOL pairs and a tab-separated manifest with stratified folds.

    ``k=1`` puts every sample in fold 0 (train and evaluate on the same set).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds = [np.arange(len(pairs))] if k == 1 else fold_split([p.label for p in pairs], k, seed)
    fold_of = {int(i): f for f, idx in enumerate(folds) for i in idx}
    entries = []
    for i, pair in enumerate(pairs):
        for vol in (pair.initial, pair.followup):
            if vol.min() < 0.0 or vol.max() > 1.0:
                raise ValueError(f"{pair.id}: intensities outside [0, 1]")
        e = ManifestEntry(pair.id, f"{pair.id}_initial.rvol", f"{pair.id}_followup.rvol", pair.label, fold_of[i])
        save_rvol(out / e.initial, pair.initial)
        save_rvol(out / e.followup, pair.followup)
        entries.append(e)
    (out / MANIFEST).write_text("".join(e.line() + "\n" for e in entries))
    return entries


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{path}:{n}: expected 5 tab-separated fields, got {len(parts)}")
        entries.append(ManifestEntry(parts[0], parts[1], parts[2], int(parts[3]), int(parts[4])))
    return entries


def load_dataset(data_dir) -> tuple[list[VolumePair], list[ManifestEntry]]:
    root = Path(data_dir)
    entries = read_manifest(root / MANIFEST)
    pairs = [
        preprocess(VolumePair(load_rvol(root / e.initial), load_rvol(root / e.followup), e.label, e.id))
        for e in entries
    ]
    return pairs, entries
