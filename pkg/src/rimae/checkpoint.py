"""Binary checkpoint format for model parameters.

Layout: magic ``MLRF``, u32 format version, a length-prefixed UTF-8 config
block of ``key=value`` lines, a tensor table (count; per tensor: u32 name
length, name, u32 rank, u64 dims, float64 little-endian data), and a trailing
CRC32 of everything before it. Serialization is canonical (sorted keys and
tensor names), so save -> load -> save reproduces the bytes exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState

MAGIC = b"MLRF"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""


def _config_lines(config: ModelConfig) -> bytes:
    lines = sorted(f"{f.name}={getattr(config, f.name)}" for f in fields(config))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config(blob: bytes) -> ModelConfig:
    values = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, raw = line.partition("=")
        values[key] = raw
    known = {f.name: f for f in fields(ModelConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise CheckpointError(f"unknown config key {sorted(unknown)[0]!r}")
    missing = set(known) - set(values)
    if missing:
        raise CheckpointError(f"missing config key {sorted(missing)[0]!r}")
    try:
        return ModelConfig(**{k: int(v) for k, v in values.items()})
    except ValueError as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc


def serialize(state: ModelState) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    config_blob = _config_lines(state.config)
    parts.append(struct.pack("<I", len(config_blob)))
    parts.append(config_blob)

    named = sorted(state.named_parameters(), key=lambda item: item[0])
    parts.append(struct.pack("<I", len(named)))
    for name, tensor in named:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64s(self, count: int) -> tuple:
        return struct.unpack(f"<{count}Q", self.take(8 * count))


def deserialize(blob: bytes) -> tuple[ModelState, ModelConfig]:
    if len(blob) < 8:
        raise CheckpointError("truncated checkpoint")
    body, crc_bytes = blob[:-4], blob[-4:]
    reader = _Reader(body)
    if reader.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise CheckpointError("checksum mismatch")

    config = _parse_config(reader.take(reader.u32()))
    count = reader.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        rank = reader.u32()
        dims = reader.u64s(rank)
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(dims)
        tensors[name] = data.astype(np.float64)
    if reader.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")

    state = ModelState(config, seed=0)
    try:
        state.load_tensors(tensors)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return state, config


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    Path(path).write_bytes(serialize(state))


def load_checkpoint(path: str | Path) -> tuple[ModelState, ModelConfig]:
    return deserialize(Path(path).read_bytes())
