"""Per-item modality feature tables and their binary on-disk format.

Binary layout: 8-byte magic ``MMSRFEAT``, little-endian u32 count, u32 dim, then
``count`` records of (u32 index into the sidecar id list, dim little-endian f32).
The sidecar is a JSON array of item-identifier strings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import require

MAGIC = b"MMSRFEAT"

IMAGE = "image"
TEXT = "text"
CHANNELS = (IMAGE, TEXT)


@dataclass
class FeatureTable:
    channel: str
    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        require(self.dim > 0, "feature dim must be positive")
        for item, vec in self.entries.items():
            self.entries[item] = self._check(item, vec)

    def _check(self, item: str, vec) -> np.ndarray:
        arr = np.asarray(vec, dtype=np.float32)
        require(arr.shape == (self.dim,), f"feature for {item!r} has shape {arr.shape}, want ({self.dim},)")
        require(bool(np.all(np.isfinite(arr))), f"feature for {item!r} is not finite")
        return arr

    def set(self, item: str, vec) -> None:
        self.entries[item] = self._check(item, vec)

    def get(self, item: str) -> np.ndarray | None:
        return self.entries.get(item)

    def __contains__(self, item: str) -> bool:
        return item in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def copy(self) -> "FeatureTable":
        return FeatureTable(
            channel=self.channel,
            dim=self.dim,
            entries={k: v.copy() for k, v in self.entries.items()},
        )

    def matrix(self, items: list[str]) -> np.ndarray:
        """Stack the vectors of ``items`` (each must be present) into (n, dim)."""
        missing = [i for i in items if i not in self.entries]
        require(not missing, f"items without {self.channel} features: {missing[:5]}")
        if not items:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self.entries[i] for i in items])


def save_feature_table(table: FeatureTable, path: str | Path, ids_path: str | Path) -> None:
    """Write the binary feature file plus its JSON id sidecar (sorted item order)."""
    ids = sorted(table.entries)
    with open(ids_path, "w", encoding="utf-8") as fh:
        json.dump(ids, fh, sort_keys=True)
        fh.write("\n")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(ids), table.dim))
        for idx, item in enumerate(ids):
            fh.write(struct.pack("<I", idx))
            fh.write(table.entries[item].astype("<f4").tobytes())


def load_feature_table(path: str | Path, ids_path: str | Path, channel: str) -> FeatureTable:
    with open(ids_path, "r", encoding="utf-8") as fh:
        ids = json.load(fh)
    require(isinstance(ids, list), f"{ids_path}: sidecar must be a JSON array of strings")
    raw = Path(path).read_bytes()
    require(raw[:8] == MAGIC, f"{path}: bad magic {raw[:8]!r}")
    count, dim = struct.unpack_from("<II", raw, 8)
    offset = 16
    record = struct.Struct(f"<I{dim}f")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        fields = record.unpack_from(raw, offset)
        offset += record.size
        idx = fields[0]
        require(idx < len(ids), f"{path}: item index {idx} outside sidecar of {len(ids)} ids")
        entries[ids[idx]] = np.asarray(fields[1:], dtype=np.float32)
    return FeatureTable(channel=channel, dim=dim, entries=entries)
