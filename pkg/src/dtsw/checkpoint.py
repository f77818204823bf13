"""Versioned binary checkpoints.

Layout (all integers u32 little-endian, data f32 little-endian, row-major)::

    b"DTSW0001"
    config length, config text (utf-8, canonical key=value lines)
    tensor count
    per tensor: name length, name (utf-8), rank, extents..., data

Model parameters are stored under their dotted names. Training state lives
under reserved prefixes: ``disc.`` for the discriminator, ``adam.m.`` /
``adam.v.`` (and ``disc_adam.``) for optimizer moments, and ``state.`` for
scalars such as the step count and task weights.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DTSW0001"
_U32 = struct.Struct("<I")
_MAX_RANK = 8


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def scalar(self, name: str, default=None):
        arr = self.tensors.get("state." + name)
        if arr is None:
            return default
        return float(arr.reshape(-1)[0])


def _write_u32(buf, value: int) -> None:
    if not 0 <= value < 2**32:
        raise CheckpointError(f"value {value} does not fit in u32")
    buf.write(_U32.pack(value))


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = ckpt.config_text.encode("utf-8")
    _write_u32(buf, len(cfg))
    buf.write(cfg)
    _write_u32(buf, len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        _write_u32(buf, len(raw))
        buf.write(raw)
        _write_u32(buf, arr.ndim)
        for e in arr.shape:
            _write_u32(buf, e)
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if bytes(r.take(len(MAGIC))) != MAGIC:
        raise CheckpointError("bad magic: not a DTSW0001 checkpoint")
    config_text = bytes(r.take(r.u32())).decode("utf-8")
    tensors = {}
    for _ in range(r.u32()):
        name = bytes(r.take(r.u32())).decode("utf-8")
        rank = r.u32()
        if rank > _MAX_RANK:
            raise CheckpointError(f"tensor {name!r}: implausible rank {rank}")
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after last tensor")
    return Checkpoint(config_text, tensors)


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
