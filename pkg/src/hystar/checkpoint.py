"""Binary checkpoint container.

Layout (little-endian): b"HYST", u8 version, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 rank, rank x u32 dims, u8 dtype tag, raw
row-major data; finally u32 crc32 of every preceding byte.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ChecksumError, FormatError, ShapeError, VersionError

MAGIC = b"HYST"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAGS = {torch.float32: 0, torch.float64: 1}


def state_tensors(model: nn.Module) -> dict[str, torch.Tensor]:
    # keep_vars so tied parameters are stored once per name but loaded back consistently
    return dict(model.state_dict(keep_vars=True))


def encode(tensors: dict[str, torch.Tensor]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<BI", VERSION, len(tensors))
    for name, t in tensors.items():
        if t.dtype not in TAGS:
            raise FormatError(f"{name}: unsupported dtype {t.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        tag = TAGS[t.dtype]
        out += struct.pack("<B", tag)
        out += t.detach().cpu().contiguous().numpy().astype(DTYPES[tag], copy=False).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 13 or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if blob[4] != VERSION:
        raise VersionError(f"unsupported checkpoint version {blob[4]}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupted)")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob) - 4:
            raise FormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        name = bytes(take(f"<{n}s")[0]).decode("utf-8")
        (rank,) = take("<B")
        shape = take(f"<{rank}I")
        (tag,) = take("<B")
        if tag not in DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * DTYPES[tag].itemsize
        if pos + nbytes > len(blob) - 4:
            raise FormatError("truncated checkpoint")
        tensors[name] = np.frombuffer(blob, DTYPES[tag], int(np.prod(shape, dtype=np.int64)), pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob) - 4:
        raise FormatError("trailing bytes after last tensor")
    return tensors


def save_checkpoint(model: nn.Module, path: str | Path) -> None:
    Path(path).write_bytes(encode(state_tensors(model)))


def load_checkpoint(model: nn.Module, path: str | Path) -> nn.Module:
    """Copy every stored tensor into ``model``; names and shapes must match exactly."""
    stored = decode(Path(path).read_bytes())
    current = state_tensors(model)
    if set(stored) != set(current):
        missing, extra = set(current) - set(stored), set(stored) - set(current)
        raise FormatError(f"checkpoint tensor names differ (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    with torch.no_grad():
        for name, arr in stored.items():
            target = current[name]
            if tuple(arr.shape) != tuple(target.shape):
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {tuple(target.shape)}")
            target.copy_(torch.from_numpy(arr).to(target.dtype))
    return model
