"""MHGC checkpoint container: config snapshot plus named parameter tensors.

Layout: magic ``MHGC``, u32 version, u32 config-JSON length, the config
JSON (sorted keys), u32 record count, then per tensor: u32 name length,
name bytes, u32 rank, rank u32 dims, float32 little-endian data.  Writes
are byte-deterministic, so save/load/save round-trips are identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, ModelParams

MAGIC = b"MHGC"
VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file failed structural validation."""


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    config_blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<2I", VERSION, len(config_blob)), config_blob]
    chunks.append(struct.pack("<I", len(params.tensors)))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(raw, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an MHGC checkpoint")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_blob = reader.take(reader.u32())
    try:
        config_dict = json.loads(config_blob.decode("utf-8"))
        config = ModelConfig(**config_dict)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid config snapshot: {exc}") from exc
    n_records = reader.u32()
    tensors: dict[str, ad.Tensor] = {}
    for _ in range(n_records):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        if rank > 4:
            raise CheckpointError(f"{path}: implausible tensor rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = ad.Tensor(data.astype(np.float32), requires_grad=True)
    if reader.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - reader.pos} trailing bytes")
    return ModelParams(tensors), config
