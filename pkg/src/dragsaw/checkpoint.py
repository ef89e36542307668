"""Binary checkpoint format for named float64 tensors.

Layout: magic "PDSW", u32 LE format version, u32 LE tensor count, then per
tensor: u32 LE name length, UTF-8 name, u32 LE rank, u32 LE dims, raw
little-endian float64 payload. BN running stats are stored as ordinary
named tensors, so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"PDSW"
VERSION = 1


def save_checkpoint(path: Path | str, tensors: "OrderedDict[str, np.ndarray]") -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        nm = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nm)))
        chunks.append(nm)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Path | str) -> "OrderedDict[str, np.ndarray]":
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise RuntimeError(f"{path}: bad checkpoint magic: expected {MAGIC!r}, found {blob[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise RuntimeError(f"{path}: truncated checkpoint at byte {pos}")
        out = blob[pos : pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise RuntimeError(f"{path}: unsupported checkpoint version {version}")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        tensors[name] = data
    if pos != len(blob):
        raise RuntimeError(f"{path}: {len(blob) - pos} trailing bytes after tensor data")
    return tensors
