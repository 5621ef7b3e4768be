"""Experiment recipes: ablation grid, missing-modality robustness, c/k sweep,
and the fusion-order perturbation study.

Every runner echoes its full config and seeds into the result object so a
report can be reproduced exactly from its own JSON.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from statistics import median

from .baselines import FusionBaseline
from .data import PerturbationConfig, SplitDataset, perturb
from .features import FeatureTable
from .metrics import MetricReport
from .model import MMSRRecommender
from .quantizer import CodebookQuantizer, ModalityCodebook, per_item_codebook

logger = logging.getLogger(__name__)

# Aggregator variants plus the two representation ablations (run with the gated
# aggregator but the named embedding zeroed).
ABLATION_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("han", {}),
    ("sync", {"aggregator": "sync"}),
    ("ni_hohe", {"aggregator": "ni_hohe"}),
    ("ni_heho", {"aggregator": "ni_heho"}),
    ("hohe", {"aggregator": "hohe"}),
    ("heho", {"aggregator": "heho"}),
    ("ho", {"aggregator": "ho"}),
    ("he", {"aggregator": "he"}),
    ("no_position", {"use_position": False}),
    ("no_type", {"use_type": False}),
)


def reassign_codebooks(
    quantizers: dict[str, CodebookQuantizer], features: dict[str, FeatureTable]
) -> dict[str, ModalityCodebook]:
    """Frozen-codebook assignments recomputed from (possibly perturbed) features."""
    return {
        channel: quantizers[channel].build_codebook(features[channel])
        for channel in sorted(quantizers)
        if channel in features
    }


def train_and_eval(
    split: SplitDataset,
    codebooks: dict[str, ModalityCodebook],
    config: dict,
    seed: int,
    ks=(5, 20),
) -> tuple[MMSRRecommender, MetricReport]:
    model = MMSRRecommender(**{**config, "seed": seed})
    model.fit(split, codebooks)
    report = model.evaluate(split.test, ks=ks, config={**config, "seed": seed})
    return model, report


@dataclass
class AblationRow:
    variant: str
    overrides: dict
    per_seed: dict[int, MetricReport]
    hr5_median: float
    mrr5_median: float
    hetero_edges_read: int


@dataclass
class AblationResult:
    rows: list[AblationRow]
    base_config: dict
    seeds: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {
            "base_config": self.base_config,
            "seeds": list(self.seeds),
            "rows": [
                {
                    "variant": r.variant,
                    "overrides": r.overrides,
                    "hr5_median": r.hr5_median,
                    "mrr5_median": r.mrr5_median,
                    "hetero_edges_read": r.hetero_edges_read,
                    "per_seed": {str(s): rep.to_json_dict() for s, rep in sorted(r.per_seed.items())},
                }
                for r in self.rows
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant", "hr5_median", "mrr5_median"])
        for r in self.rows:
            writer.writerow([r.variant, f"{r.hr5_median:.6f}", f"{r.mrr5_median:.6f}"])
        return buf.getvalue()


def run_ablation(
    split: SplitDataset,
    codebooks: dict[str, ModalityCodebook],
    base_config: dict,
    seeds=(0, 1, 2),
    variants=ABLATION_VARIANTS,
    ks=(5, 20),
) -> AblationResult:
    """Train/evaluate each aggregator + representation variant on shared seeds."""
    rows = []
    for name, overrides in variants:
        per_seed = {}
        hetero_reads = 0
        for seed in seeds:
            config = {**base_config, **overrides}
            model, report = train_and_eval(split, codebooks, config, seed, ks=ks)
            per_seed[seed] = report
            hetero_reads += model.edge_usage_.get("he", 0)
        rows.append(
            AblationRow(
                variant=name,
                overrides=overrides,
                per_seed=per_seed,
                hr5_median=median(r.hr[5] for r in per_seed.values()),
                mrr5_median=median(r.mrr[5] for r in per_seed.values()),
                hetero_edges_read=hetero_reads,
            )
        )
        logger.info("ablation %-12s hr5=%.4f", name, rows[-1].hr5_median)
    return AblationResult(rows=rows, base_config=dict(base_config), seeds=tuple(seeds))


@dataclass
class RobustnessPoint:
    mode: str
    ratio: float
    report: MetricReport


@dataclass
class RobustnessResult:
    points: list[RobustnessPoint]
    config: dict
    perturb_seed: int

    def curve(self, mode: str) -> list[tuple[float, float]]:
        return sorted(
            (p.ratio, p.report.hr[5]) for p in self.points if p.mode == mode
        )

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "perturb_seed": self.perturb_seed,
            "points": [
                {"mode": p.mode, "ratio": p.ratio, "report": p.report.to_json_dict()}
                for p in self.points
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["ratio", "mode", "hr5", "mrr5"])
        for p in self.points:
            writer.writerow(
                [f"{p.ratio:g}", p.mode, f"{p.report.hr[5]:.6f}", f"{p.report.mrr[5]:.6f}"]
            )
        return buf.getvalue()


def run_robustness(
    model: MMSRRecommender,
    split: SplitDataset,
    features: dict[str, FeatureTable],
    quantizers: dict[str, CodebookQuantizer],
    ratios=(0.1, 0.3, 0.5, 0.7),
    modes=("image", "text", "mix"),
    perturb_seed: int = 0,
    ks=(5, 20),
    config: dict | None = None,
) -> RobustnessResult:
    """Delete test-time modality entries, re-assign codes against the frozen
    codebook, rebuild graphs, and evaluate the already-trained model."""
    points = []
    for mode in modes:
        for ratio in ratios:
            cfg = PerturbationConfig(kind=f"missing_{mode}", ratio=ratio, seed=perturb_seed)
            _, perturbed = perturb(split, features, cfg)
            books = reassign_codebooks(quantizers, perturbed)
            report = model.evaluate(
                split.test, ks=ks, codebooks=books,
                config={**(config or {}), "mode": mode, "ratio": ratio},
            )
            points.append(RobustnessPoint(mode=mode, ratio=ratio, report=report))
            logger.info("robustness mode=%-5s e=%.1f hr5=%.4f", mode, ratio, report.hr[5])
    return RobustnessResult(points=points, config=dict(config or {}), perturb_seed=perturb_seed)


@dataclass
class SweepCell:
    c: int
    k: int
    skipped: bool
    report: MetricReport | None


@dataclass
class SweepResult:
    cells: list[SweepCell]
    no_codes: MetricReport
    config: dict

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "no_codes": self.no_codes.to_json_dict(),
            "cells": [
                {
                    "c": cell.c,
                    "k": cell.k,
                    "skipped": cell.skipped,
                    "report": cell.report.to_json_dict() if cell.report else None,
                }
                for cell in self.cells
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["c", "k", "hr5", "mrr5", "note"])
        writer.writerow(
            ["-", "-", f"{self.no_codes.hr[5]:.6f}", f"{self.no_codes.mrr[5]:.6f}", "no_codes"]
        )
        for cell in self.cells:
            if cell.skipped:
                writer.writerow([cell.c, cell.k, "", "", "skipped k>c"])
            else:
                writer.writerow(
                    [cell.c, cell.k, f"{cell.report.hr[5]:.6f}", f"{cell.report.mrr[5]:.6f}", ""]
                )
        return buf.getvalue()


def run_ck_sweep(
    split: SplitDataset,
    features: dict[str, FeatureTable],
    base_config: dict,
    cs: list[int],
    ks_grid: list[int],
    quantizer_config: dict | None = None,
    seed: int = 0,
    ks=(5, 20),
) -> SweepResult:
    """Retrain the quantizer and model for every (c, k) cell; k > c cells are
    skipped with a notice. Adds the raw per-item-node baseline row once."""
    train_items = sorted({i for p in split.train for i in (*p.prefix, p.target)})
    qcfg = dict(quantizer_config or {})
    cells = []
    first_quantizers: dict[str, CodebookQuantizer] | None = None
    for c in cs:
        quantizers = {
            ch: CodebookQuantizer(**{**qcfg, "c": c, "k": 1}).fit(features[ch], train_items)
            for ch in sorted(features)
        }
        if first_quantizers is None:
            first_quantizers = quantizers
        for k in ks_grid:
            if k > c:
                logger.info("sweep cell c=%d k=%d skipped (k > c)", c, k)
                cells.append(SweepCell(c=c, k=k, skipped=True, report=None))
                continue
            books = {}
            for ch, q in quantizers.items():
                q.k = k
                books[ch] = q.build_codebook(features[ch])
            config = {**base_config, "c": c, "k": k}
            _, report = train_and_eval(split, books, config, seed, ks=ks)
            cells.append(SweepCell(c=c, k=k, skipped=False, report=report))
            logger.info("sweep cell c=%d k=%d hr5=%.4f", c, k, report.hr[5])

    no_code_books = {
        ch: per_item_codebook(first_quantizers[ch], features[ch]) for ch in sorted(features)
    }
    config = {**base_config, "c": len(next(iter(no_code_books.values())).assignments), "k": 1}
    _, no_codes = train_and_eval(split, no_code_books, config, seed, ks=ks)
    logger.info("sweep no-codes baseline hr5=%.4f", no_codes.hr[5])
    return SweepResult(cells=cells, no_codes=no_codes, config=dict(base_config))


@dataclass
class FusionStudyResult:
    # per mode: per seed: {"clean": hr5, "disordered": hr5, "mismatched": hr5}
    runs: dict[str, dict[int, dict[str, float]]]
    mismatch_ratio: float
    config: dict

    def median_drop(self, mode: str, kind: str) -> float:
        return median(
            run["clean"] - run[kind] for run in self.runs[mode].values()
        )

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "mismatch_ratio": self.mismatch_ratio,
            "runs": {
                mode: {str(s): v for s, v in sorted(seeds.items())}
                for mode, seeds in sorted(self.runs.items())
            },
            "median_drops": {
                mode: {
                    "disordered": self.median_drop(mode, "disordered"),
                    "mismatched": self.median_drop(mode, "mismatched"),
                }
                for mode in sorted(self.runs)
            },
        }


def fusion_order_study(
    split: SplitDataset,
    features: dict[str, FeatureTable],
    quantizers: dict[str, CodebookQuantizer],
    baseline_config: dict | None = None,
    mismatch_ratio: float = 0.5,
    perturb_seed: int = 97,
    seeds=(0, 1, 2),
) -> FusionStudyResult:
    """Train clean early/late baselines, then evaluate under test-time prefix
    shuffling (disordered) and feature displacement (mismatched)."""
    cfg = dict(baseline_config or {})
    books_clean = reassign_codebooks(quantizers, features)
    dis_split, _ = perturb(
        split, features, PerturbationConfig(kind="disordered", ratio=1.0, seed=perturb_seed)
    )
    _, mis_features = perturb(
        split, features,
        PerturbationConfig(kind="mismatched", ratio=mismatch_ratio, seed=perturb_seed),
    )
    books_mis = reassign_codebooks(quantizers, mis_features)

    runs: dict[str, dict[int, dict[str, float]]] = {"early": {}, "late": {}}
    for seed in seeds:
        for mode in ("early", "late"):
            model = FusionBaseline(**{**cfg, "mode": mode, "seed": seed})
            model.fit(split, books_clean)
            clean = model.evaluate(split.test, ks=(5,)).hr[5]
            disordered = model.evaluate(dis_split.test, ks=(5,)).hr[5]
            mismatched = model.evaluate(split.test, ks=(5,), codebooks=books_mis).hr[5]
            runs[mode][seed] = {
                "clean": clean, "disordered": disordered, "mismatched": mismatched
            }
            logger.info(
                "fusion %-5s seed=%d clean=%.4f disordered=%.4f mismatched=%.4f",
                mode, seed, clean, disordered, mismatched,
            )
    return FusionStudyResult(
        runs=runs, mismatch_ratio=mismatch_ratio,
        config={**cfg, "seeds": list(seeds), "perturb_seed": perturb_seed},
    )
