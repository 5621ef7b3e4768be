"""Named-tensor checkpoint format.

Layout: 8-byte magic ``MMSRCKPT``, little-endian u32 version, then one record
per tensor: u32 name byte-length, UTF-8 name, u32 rank, rank u32 dims, and the
payload as little-endian f32. Tensors are written in sorted-name order so the
file bytes are a deterministic function of the contents.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .validation import require

MAGIC = b"MMSRCKPT"
VERSION = 1


def save_named_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_named_tensors(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    require(raw[:8] == MAGIC, f"{path}: bad magic {raw[:8]!r}")
    (version,) = struct.unpack_from("<I", raw, 8)
    require(version == VERSION, f"{path}: unsupported version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
        offset += 4 * count
        tensors[name] = arr.copy()
    return tensors
