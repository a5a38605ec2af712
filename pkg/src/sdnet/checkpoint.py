"""Versioned binary container of named float32 tensors.

Layout (all integers little-endian)::

    b"SDNETCKPT"  u32 version  u64 tensor_count
    per tensor:   u32 name_len  name(utf-8)  u32 rank  i64 dims[rank]  f32 values[prod(dims)]
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"SDNETCKPT"
VERSION = 1


def save_tensors(path, tensors: Mapping[str, torch.Tensor]) -> None:
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_tensors(path) -> dict[str, torch.Tensor]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    r = _Reader(path.read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic string, not an SDNET checkpoint")
    version, count = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {VERSION}")
    out = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}q")
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        out[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes after {count} tensors")
    return out
