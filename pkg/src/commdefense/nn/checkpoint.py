"""Binary named-tensor checkpoint files.

Layout (all integers little-endian uint32 unless noted):

    magic   8 bytes  b"CDTENSR1"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u32, name utf-8 bytes
        ndim u32, dims u32 * ndim
        payload: float64 little-endian, row major

Save/load round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"CDTENSR1"
VERSION = 1


def save_tensors(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if len(raw) < 16 or bytes(view[:8]) != MAGIC:
        raise CheckpointError(f"{path}: not a tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(view[pos:pos + 8 * n], dtype="<f8").reshape(dims)
            pos += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
