"""Command-line pipeline: prepare | quantize | train | eval | ablate | robust | sweep.

Every command reads its inputs from the run directory written by the previous
stage, echoes the resolved config into its outputs, and prints a one-line
summary. Exit codes: 0 ok, 2 usage/input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import artifacts, synthetic
from .config import ConfigError, load_config
from .data import (
    DataError,
    InteractionRecord,
    core_filter,
    load_interactions,
    split_sequences,
)
from .experiments import run_ablation, run_ck_sweep, run_robustness
from .features import CHANNELS, FeatureTable, load_feature_table, save_feature_table
from .model import MMSRRecommender
from .quantizer import CodebookQuantizer, ModalityCodebook

logger = logging.getLogger(__name__)


class UsageError(ValueError):
    pass


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise UsageError(f"{path} not found -- run `mmsr {stage}` first")
    return path


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_features(cfg, out: Path) -> dict[str, FeatureTable]:
    """Feature tables from explicit config paths or the prepared run directory."""
    tables = {}
    for channel in CHANNELS:
        bin_path = cfg["data"][f"{channel}_features"]
        ids_path = cfg["data"][f"{channel}_ids"]
        if bin_path is None:
            candidate = out / f"features.{channel}.bin"
            if candidate.exists():
                bin_path = candidate
                ids_path = out / f"features.{channel}.ids.json"
        if bin_path is None:
            continue
        bin_path = Path(bin_path)
        if not bin_path.exists():
            raise UsageError(f"feature file not found: {bin_path}")
        if ids_path is None:
            raise UsageError(f"{channel}_ids sidecar path is required with {channel}_features")
        tables[channel] = load_feature_table(bin_path, ids_path, channel)
    return tables


def _records_to_jsonl(records: list[InteractionRecord], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"user": r.user, "item": r.item, "ts": r.ts}, sort_keys=True))
            fh.write("\n")


def _synthesize(spec_dict: dict, seed_override: int | None):
    spec_dict = dict(spec_dict)
    kind = spec_dict.pop("kind", "planted_rule")
    if seed_override is not None:
        spec_dict["seed"] = seed_override
    try:
        if kind == "planted_rule":
            return synthetic.synthesize(synthetic.PlantedRuleSpec(**spec_dict)), kind
        if kind == "dual_pattern":
            return synthetic.synthesize_dual(synthetic.DualPatternSpec(**spec_dict)), kind
    except TypeError as err:
        raise UsageError(f"bad synth spec: {err}") from err
    raise UsageError(f"unknown synth kind {kind!r}")


def cmd_prepare(cfg, args) -> int:
    out = _out_dir(cfg)
    data_cfg = cfg["data"]
    synth_spec = data_cfg["synth"]
    if args.synth:
        synth_spec = artifacts.read_json(args.synth)

    if synth_spec is not None:
        result, kind = _synthesize(synth_spec, args.seed)
        records, features = result.records, result.features
        _records_to_jsonl(records, out / "interactions.jsonl")
        for channel, table in sorted(features.items()):
            save_feature_table(
                table, out / f"features.{channel}.bin", out / f"features.{channel}.ids.json"
            )
        source = {"synth": {**synth_spec, "kind": kind}}
    else:
        if data_cfg["interactions"] is None:
            raise UsageError("data.interactions is not set and no --synth spec given")
        records = load_interactions(data_cfg["interactions"])
        features = _load_features(cfg, out)
        source = {"interactions": str(data_cfg["interactions"])}

    filtered = core_filter(records, data_cfg["min_count"])
    if not filtered:
        raise DataError("core filtering removed every interaction")
    split = split_sequences(filtered, data_cfg["test_frac"], data_cfg["min_len"])
    artifacts.save_split(split, out / "split.json")
    artifacts.write_json(
        out / "prepare_manifest.json",
        artifacts.manifest(
            cfg,
            seed=args.seed if args.seed is not None else -1,
            source=source,
            filter_order="core_filter then min_len",
            n_records=len(records),
            n_after_filter=len(filtered),
            n_train=len(split.train),
            n_test=len(split.test),
            n_items=len(split.catalog),
        ),
    )
    print(
        f"prepare: {len(split.train)} train / {len(split.test)} test points, "
        f"{len(split.catalog)} items"
    )
    return 0


def cmd_quantize(cfg, args) -> int:
    out = _out_dir(cfg)
    split = artifacts.load_split(_need(out / "split.json", "prepare"))
    features = _load_features(cfg, out)
    if not features:
        raise UsageError("no feature tables available -- run `mmsr prepare` with features")
    qcfg = cfg["quantizer"]
    model_cfg = cfg["model"]
    latent = qcfg["latent_dim"] or model_cfg["d"]
    seed = args.seed if args.seed is not None else qcfg["seed"]
    train_items = sorted({i for p in split.train for i in (*p.prefix, p.target)})

    summaries = []
    for channel in sorted(features):
        quantizer = CodebookQuantizer(
            c=model_cfg["c"],
            k=model_cfg["k"],
            latent_dim=latent,
            ae_epochs=qcfg["ae_epochs"],
            ae_lr=qcfg["ae_lr"],
            kmeans_iters=qcfg["kmeans_iters"],
            seed=seed,
        ).fit(features[channel], train_items)
        book = quantizer.build_codebook(features[channel])
        book.save(out / f"codebook.{channel}.json")
        artifacts.save_matrix(
            quantizer.autoencoder_.encode_,
            out / f"autoencoder.{channel}.encode.bin",
            out / f"autoencoder.{channel}.encode.ids.json",
        )
        artifacts.save_matrix(
            quantizer.autoencoder_.decode_,
            out / f"autoencoder.{channel}.decode.bin",
            out / f"autoencoder.{channel}.decode.ids.json",
        )
        summaries.append(
            f"{channel}: ae_loss={quantizer.autoencoder_.final_loss_:.5f} "
            f"sse={quantizer.sse_history_[-1]:.3f}"
        )
    artifacts.write_json(
        out / "quantize_manifest.json",
        artifacts.manifest(cfg, seed=seed, train_items=len(train_items)),
    )
    print(f"quantize: {'; '.join(summaries)}")
    return 0


def _load_codebooks(out: Path) -> dict[str, ModalityCodebook]:
    books = {}
    for channel in CHANNELS:
        path = out / f"codebook.{channel}.json"
        if path.exists():
            books[channel] = ModalityCodebook.load(path)
    return books


def _load_quantizers(out: Path, books: dict[str, ModalityCodebook]) -> dict[str, CodebookQuantizer]:
    quantizers = {}
    for channel, book in books.items():
        encode = artifacts.load_matrix(
            _need(out / f"autoencoder.{channel}.encode.bin", "quantize"),
            out / f"autoencoder.{channel}.encode.ids.json",
        )
        decode = artifacts.load_matrix(
            out / f"autoencoder.{channel}.decode.bin",
            out / f"autoencoder.{channel}.decode.ids.json",
        )
        quantizers[channel] = CodebookQuantizer.from_artifacts(
            channel, encode, decode, book.centers, book.k
        )
    return quantizers


def _build_model(cfg, args, split, books) -> MMSRRecommender:
    model_cfg = dict(cfg["model"])
    if args.seed is not None:
        model_cfg["seed"] = args.seed
    model = MMSRRecommender(**model_cfg)
    model.build(split, books)
    return model


def cmd_train(cfg, args) -> int:
    out = _out_dir(cfg)
    split = artifacts.load_split(_need(out / "split.json", "prepare"))
    books = _load_codebooks(out)
    model_cfg = dict(cfg["model"])
    if args.seed is not None:
        model_cfg["seed"] = args.seed
    model = MMSRRecommender(**model_cfg)
    model.fit(split, books, log_path=out / "train_log.jsonl")
    model.save_checkpoint(out / "checkpoint.ckpt")
    artifacts.write_json(
        out / "train_manifest.json",
        artifacts.manifest(
            cfg,
            seed=model_cfg["seed"],
            best_epoch=model.best_epoch_,
            graph_stats=model.graph_stats_,
        ),
    )
    if model.log_:
        last = model.log_[-1]
        val = f" val_hr5={last['val_hr5']:.4f}" if last["val_hr5"] is not None else ""
        print(f"train: {model_cfg['epochs']} epochs, loss={last['train_loss']:.4f}{val}")
    else:
        print("train: 0 epochs (checkpoint holds the initialization)")
    return 0


def cmd_eval(cfg, args) -> int:
    out = _out_dir(cfg)
    split = artifacts.load_split(_need(out / "split.json", "prepare"))
    books = _load_codebooks(out)
    model = _build_model(cfg, args, split, books)
    model.load_checkpoint(_need(out / "checkpoint.ckpt", "train"))
    ks = tuple(args.k) if args.k else tuple(cfg["eval"]["ks"])
    report = model.evaluate(split.test, ks=ks, config=cfg["model"])
    artifacts.write_json(out / "metrics.json", report.to_json_dict())
    if cfg["eval"]["dump_gates"]:
        prefixes = [p.prefix for p in split.test[:50]]
        artifacts.write_json(out / "gates.json", model.gate_report(prefixes))
    k0 = ks[0]
    print(f"eval: HR@{k0}={report.hr[k0]:.4f} MRR@{k0}={report.mrr[k0]:.4f} (n={report.n_points})")
    return 0


def cmd_ablate(cfg, args) -> int:
    out = _out_dir(cfg)
    split = artifacts.load_split(_need(out / "split.json", "prepare"))
    books = _load_codebooks(out)
    result = run_ablation(split, books, cfg["model"], seeds=tuple(cfg["ablation"]["seeds"]))
    artifacts.write_json(out / "ablation.json", result.to_json_dict())
    (out / "ablation.csv").write_text(result.to_csv(), encoding="utf-8")
    best = max(result.rows, key=lambda r: r.hr5_median)
    print(f"ablate: {len(result.rows)} variants, best={best.variant} hr5={best.hr5_median:.4f}")
    return 0


def cmd_robust(cfg, args) -> int:
    out = _out_dir(cfg)
    split = artifacts.load_split(_need(out / "split.json", "prepare"))
    books = _load_codebooks(out)
    features = _load_features(cfg, out)
    quantizers = _load_quantizers(out, books)
    model = _build_model(cfg, args, split, books)
    model.load_checkpoint(_need(out / "checkpoint.ckpt", "train"))
    result = run_robustness(
        model,
        split,
        features,
        quantizers,
        ratios=tuple(cfg["robust"]["ratios"]),
        modes=tuple(cfg["robust"]["modes"]),
        perturb_seed=cfg["robust"]["seed"],
        config=cfg["model"],
    )
    artifacts.write_json(out / "robustness.json", result.to_json_dict())
    (out / "robustness.csv").write_text(result.to_csv(), encoding="utf-8")
    worst = min(result.points, key=lambda p: p.report.hr[5])
    print(f"robust: {len(result.points)} points, min HR@5={worst.report.hr[5]:.4f} "
          f"at mode={worst.mode} e={worst.ratio:g}")
    return 0


def cmd_sweep(cfg, args) -> int:
    out = _out_dir(cfg)
    split = artifacts.load_split(_need(out / "split.json", "prepare"))
    features = _load_features(cfg, out)
    if not features:
        raise UsageError("sweep needs feature tables -- run `mmsr prepare` with features")
    qcfg = cfg["quantizer"]
    result = run_ck_sweep(
        split,
        features,
        cfg["model"],
        cs=list(cfg["sweep"]["cs"]),
        ks_grid=list(cfg["sweep"]["ks"]),
        quantizer_config={
            "latent_dim": qcfg["latent_dim"] or cfg["model"]["d"],
            "ae_epochs": qcfg["ae_epochs"],
            "ae_lr": qcfg["ae_lr"],
            "kmeans_iters": qcfg["kmeans_iters"],
            "seed": qcfg["seed"],
        },
        seed=args.seed if args.seed is not None else cfg["sweep"]["seed"],
    )
    artifacts.write_json(out / "sweep.json", result.to_json_dict())
    (out / "sweep.csv").write_text(result.to_csv(), encoding="utf-8")
    done = [c for c in result.cells if not c.skipped]
    best = max(done, key=lambda c: c.report.hr[5])
    print(f"sweep: {len(done)} cells (+no-codes), best c={best.c} k={best.k} "
          f"hr5={best.report.hr[5]:.4f}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "quantize": cmd_quantize,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robust": cmd_robust,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmsr", description="Modality-enriched sequence-graph recommender pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the stage seed")
        p.add_argument("--threads", type=int, default=None, help="torch thread count")
        p.add_argument("--out", type=str, default=None, help="run directory")
        p.add_argument("--k", type=int, action="append", default=None, help="metric cutoff (repeatable)")
        if name == "prepare":
            p.add_argument("--synth", type=str, default=None, help="synthetic generator spec JSON")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg["out_dir"] = args.out
        threads = args.threads if args.threads is not None else cfg["threads"]
        if threads:
            torch.set_num_threads(threads)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, DataError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # pragma: no cover - defensive
        print(f"runtime failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
