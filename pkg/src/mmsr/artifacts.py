"""On-disk pipeline artifacts: canonical JSON, split files, matrix round-trips.

All JSON is written with sorted keys and a trailing newline so byte-identical
re-runs are a matter of determinism upstream, not of serialization order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import SplitDataset, SplitPoint
from .features import FeatureTable, load_feature_table, save_feature_table

ARTIFACT_VERSION = "mmsr-0.1.0"


def write_json(path: str | Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def manifest(config_echo: dict, seed: int, **extra) -> dict:
    return {"artifact_version": ARTIFACT_VERSION, "config": config_echo, "seed": seed, **extra}


def save_split(split: SplitDataset, path: str | Path) -> None:
    write_json(
        path,
        {
            "artifact_version": ARTIFACT_VERSION,
            "catalog": list(split.catalog),
            "train": [[p.user, list(p.prefix), p.target] for p in split.train],
            "test": [[p.user, list(p.prefix), p.target] for p in split.test],
        },
    )


def load_split(path: str | Path) -> SplitDataset:
    obj = read_json(path)
    to_points = lambda rows: [
        SplitPoint(user=u, prefix=tuple(prefix), target=t) for u, prefix, t in rows
    ]
    return SplitDataset(
        train=to_points(obj["train"]),
        test=to_points(obj["test"]),
        catalog=tuple(obj["catalog"]),
    )


def save_matrix(mat: np.ndarray, path: str | Path, ids_path: str | Path) -> None:
    """Store a matrix row-wise in the binary feature format (row ids as items)."""
    mat = np.asarray(mat, dtype=np.float32)
    table = FeatureTable(
        channel="matrix",
        dim=mat.shape[1],
        entries={f"row_{i:06d}": mat[i] for i in range(mat.shape[0])},
    )
    save_feature_table(table, path, ids_path)


def load_matrix(path: str | Path, ids_path: str | Path) -> np.ndarray:
    table = load_feature_table(path, ids_path, channel="matrix")
    return np.stack([table.entries[key] for key in sorted(table.entries)]).astype(np.float64)
