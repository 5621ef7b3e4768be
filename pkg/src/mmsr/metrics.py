"""Top-K ranking metrics (hit ratio, mean reciprocal rank) over full catalogs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .validation import require


@dataclass
class MetricReport:
    hr: dict[int, float]
    mrr: dict[int, float]
    n_points: int
    config: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> None:
        ks = sorted(self.hr)
        require(ks == sorted(self.mrr), "hr and mrr must cover the same K values")
        prev_hr = 0.0
        for k in ks:
            hr, mrr = self.hr[k], self.mrr[k]
            require(0.0 <= mrr <= hr <= 1.0, f"need 0 <= mrr <= hr <= 1 at K={k}")
            require(hr >= prev_hr - 1e-12, f"hr must be non-decreasing in K (K={k})")
            prev_hr = hr

    def to_json_dict(self) -> dict:
        return {
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "mrr": {str(k): v for k, v in sorted(self.mrr.items())},
            "n_points": self.n_points,
            "config": self.config,
            "seed": self.seed,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "MetricReport":
        report = MetricReport(
            hr={int(k): v for k, v in obj["hr"].items()},
            mrr={int(k): v for k, v in obj["mrr"].items()},
            n_points=obj["n_points"],
            config=obj.get("config", {}),
            seed=obj.get("seed", 0),
        )
        report.validate()
        return report


def rank_of_target(logits: np.ndarray, target: int) -> int:
    """Pessimistic rank: 1 + items scored strictly higher + tied non-target items."""
    logits = np.asarray(logits)
    t = logits[target]
    higher = int(np.sum(logits > t))
    tied = int(np.sum(logits == t)) - 1
    return 1 + higher + tied


def rank_metrics(
    runs: Iterable[tuple[np.ndarray, int]],
    ks: Sequence[int] = (5, 20),
    config: dict | None = None,
    seed: int = 0,
) -> MetricReport:
    """Score a batch of (logits, target-index) pairs at each cutoff in ``ks``."""
    ks = sorted(set(int(k) for k in ks))
    require(bool(ks) and ks[0] >= 1, "need at least one positive K")
    hits = {k: 0.0 for k in ks}
    rr = {k: 0.0 for k in ks}
    n = 0
    for logits, target in runs:
        require(0 <= target < len(logits), f"target {target} outside catalog of {len(logits)}")
        rank = rank_of_target(logits, target)
        for k in ks:
            if rank <= k:
                hits[k] += 1.0
                rr[k] += 1.0 / rank
        n += 1
    require(n > 0, "rank_metrics needs at least one scored run")
    report = MetricReport(
        hr={k: hits[k] / n for k in ks},
        mrr={k: rr[k] / n for k in ks},
        n_points=n,
        config=dict(config or {}),
        seed=seed,
    )
    report.validate()
    return report
