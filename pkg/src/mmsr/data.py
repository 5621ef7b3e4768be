"""Interaction data: loading, core filtering, temporal splitting, perturbations.

Interactions arrive as JSON lines with keys ``user``, ``item``, ``ts``. A user's
history is ordered by ``ts`` (stable sort, so ties keep file order), split into
per-target prediction points, and optionally perturbed for the robustness and
fusion-order studies.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import FeatureTable
from .validation import require


class DataError(ValueError):
    """Raised for malformed input files or infeasible preprocessing requests."""


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    ts: int


@dataclass(frozen=True)
class SplitPoint:
    """One next-item prediction point: the full preceding prefix and its target."""

    user: str
    prefix: tuple[str, ...]
    target: str


@dataclass
class SplitDataset:
    train: list[SplitPoint]
    test: list[SplitPoint]
    catalog: tuple[str, ...]

    def vocab(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.catalog)}


PERTURBATION_KINDS = (
    "disordered",
    "mismatched",
    "missing_image",
    "missing_text",
    "missing_mix",
)


@dataclass(frozen=True)
class PerturbationConfig:
    kind: str
    ratio: float
    seed: int
    # When False, Mismatched displaces each channel along its own cycle instead
    # of moving both channels of an item together.
    joint: bool = True

    def __post_init__(self):
        require(self.kind in PERTURBATION_KINDS, f"unknown perturbation kind {self.kind!r}")
        require(0.0 <= self.ratio <= 1.0, f"ratio must be in [0,1], got {self.ratio}")


def load_interactions(path: str | Path) -> list[InteractionRecord]:
    """Parse a JSON-lines interaction file, one object per non-empty line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"interactions file not found: {path}")
    records: list[InteractionRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"line {lineno}: invalid JSON ({err.msg})") from err
            if not isinstance(obj, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            for key in ("user", "item", "ts"):
                if key not in obj:
                    raise DataError(f"line {lineno}: missing key {key!r}")
            user, item, ts = obj["user"], obj["item"], obj["ts"]
            if not isinstance(user, str) or not isinstance(item, str):
                raise DataError(f"line {lineno}: user and item must be strings")
            if isinstance(ts, bool) or not isinstance(ts, int):
                raise DataError(f"line {lineno}: ts must be an integer")
            records.append(InteractionRecord(user=user, item=item, ts=ts))
    if not records:
        raise DataError(f"interactions file is empty: {path}")
    return records


def core_filter(records: Sequence[InteractionRecord], min_count: int) -> list[InteractionRecord]:
    """Iteratively drop users/items with fewer than ``min_count`` interactions.

    Repeats until a fixpoint, i.e. the maximal subset where every surviving user
    and every surviving item has at least ``min_count`` interactions. May return
    an empty list.
    """
    require(min_count >= 1, "min_count must be >= 1")
    current = list(records)
    while True:
        user_counts = Counter(r.user for r in current)
        item_counts = Counter(r.item for r in current)
        kept = [
            r
            for r in current
            if user_counts[r.user] >= min_count and item_counts[r.item] >= min_count
        ]
        if len(kept) == len(current):
            return kept
        current = kept


def _user_sequences(records: Sequence[InteractionRecord]) -> dict[str, list[str]]:
    """Group items per user, stable-sorted by timestamp (ties keep file order)."""
    grouped: dict[str, list[tuple[int, str]]] = {}
    for rec in records:
        grouped.setdefault(rec.user, []).append((rec.ts, rec.item))
    sequences: dict[str, list[str]] = {}
    for user, pairs in grouped.items():
        pairs.sort(key=lambda p: p[0])  # stable: file order breaks ts ties
        sequences[user] = [item for _, item in pairs]
    return sequences


def split_sequences(
    records: Sequence[InteractionRecord],
    test_frac: float = 0.2,
    min_len: int = 5,
) -> SplitDataset:
    """Leave-last-fraction-out split.

    Per user: sort by ``ts``, drop users shorter than ``min_len``, and turn every
    position >= 2 into a (prefix, target) point. The last ``ceil(len * test_frac)``
    targets are test points; the rest train. Users whose training region would be
    empty are dropped so that every test user keeps at least one training point.
    """
    require(0.0 < test_frac < 1.0, "test_frac must be in (0, 1)")
    require(min_len >= 2, "min_len must be >= 2")
    sequences = _user_sequences(records)

    train: list[SplitPoint] = []
    test: list[SplitPoint] = []
    catalog: set[str] = set()
    for user in sorted(sequences):
        seq = sequences[user]
        n = len(seq)
        if n < min_len:
            continue
        n_test = math.ceil(n * test_frac)
        if n - 1 - n_test < 1:
            continue
        catalog.update(seq)
        for t in range(1, n):
            point = SplitPoint(user=user, prefix=tuple(seq[:t]), target=seq[t])
            if t >= n - n_test:
                test.append(point)
            else:
                train.append(point)
    if not test:
        raise DataError("no user survived the split (check min_len / test_frac)")
    return SplitDataset(train=train, test=test, catalog=tuple(sorted(catalog)))


def perturb(
    split: SplitDataset,
    features: Mapping[str, FeatureTable],
    cfg: PerturbationConfig,
) -> tuple[SplitDataset, dict[str, FeatureTable]]:
    """Apply one perturbation; pure, deterministic under ``cfg.seed``.

    disordered      shuffle the prefix of each selected point (target untouched)
    mismatched      displace selected items' feature vectors along a shuffled cycle
    missing_*       delete the named channel entry for the selected items
    """
    rng = np.random.default_rng(cfg.seed)
    new_features = {ch: table.copy() for ch, table in features.items()}
    new_split = SplitDataset(
        train=list(split.train), test=list(split.test), catalog=split.catalog
    )

    if cfg.kind == "disordered":
        def shuffle_points(points: list[SplitPoint]) -> list[SplitPoint]:
            out = []
            for p in points:
                if rng.random() < cfg.ratio:
                    perm = rng.permutation(len(p.prefix))
                    out.append(replace(p, prefix=tuple(p.prefix[i] for i in perm)))
                else:
                    out.append(p)
            return out

        new_split.train = shuffle_points(new_split.train)
        new_split.test = shuffle_points(new_split.test)
        return new_split, new_features

    if cfg.kind == "mismatched":
        population = sorted({item for t in features.values() for item in t.entries})
        n_sel = int(round(cfg.ratio * len(population)))
        if n_sel < 2:
            return new_split, new_features

        def displace(table: FeatureTable, selected: np.ndarray) -> None:
            cycle = [population[i] for i in selected if population[i] in table.entries]
            if len(cycle) < 2:
                return
            moved = {
                cycle[i]: table.entries[cycle[(i + 1) % len(cycle)]] for i in range(len(cycle))
            }
            table.entries.update(moved)

        if cfg.joint:
            selected = rng.permutation(len(population))[:n_sel]
            for table in new_features.values():
                displace(table, selected)
        else:
            for channel in sorted(new_features):
                selected = rng.permutation(len(population))[:n_sel]
                displace(new_features[channel], selected)
        return new_split, new_features

    # missing_image / missing_text / missing_mix
    channels = {
        "missing_image": ("image",),
        "missing_text": ("text",),
        "missing_mix": ("image", "text"),
    }[cfg.kind]
    present = sorted(
        {item for ch in channels if ch in features for item in features[ch].entries}
    )
    n_sel = int(round(cfg.ratio * len(present)))
    selected = rng.permutation(len(present))[:n_sel]
    for idx in sorted(selected):
        item = present[idx]
        for ch in channels:
            if ch in new_features:
                new_features[ch].entries.pop(item, None)
    return new_split, new_features
