"""The graph recommender: fit on split interaction data, score full catalogs.

``MMSRRecommender`` wires the pipeline end to end: per-point sequence graphs,
embedding tables seeded from the quantizer's cluster centers, the chosen
propagation stack, last pooling, dot-product scoring over the catalog, and a
full-softmax cross-entropy Adam loop with optional per-user validation for
checkpoint selection.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch.nn import functional as F

from . import checkpoint as ckpt
from .data import SplitDataset, SplitPoint
from .embeddings import EmbeddingTables
from .graph import build_graph
from .metrics import MetricReport, rank_metrics
from .propagation import (
    GraphArrays,
    GraphBatch,
    PropagationParams,
    encode_graph,
    initial_states,
    propagate,
)
from .quantizer import ModalityCodebook
from .validation import require


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


def last_pool(states: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
    """Select the propagated state of each graph's final-position item node."""
    return states[batch.last_node]


def score_items(P: torch.Tensor, item_table: torch.Tensor) -> torch.Tensor:
    """Raw logits: dot product of the user representation with every candidate."""
    return P @ item_table.T


def xent_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy over the full catalog (log-sum-exp stabilized)."""
    return F.cross_entropy(logits, targets)


def l2_penalty(parameters) -> torch.Tensor:
    terms = [p.pow(2).sum() for p in parameters if p.requires_grad]
    return torch.stack(terms).sum()


def _torch_dtype(name: str) -> torch.dtype:
    require(name in ("float32", "float64"), f"dtype must be float32 or float64, got {name!r}")
    return torch.float64 if name == "float64" else torch.float32


class MMSRRecommender(BaseEstimator):
    def __init__(
        self,
        d: int = 128,
        layers: int = 2,
        aggregator: str = "han",
        lr: float = 1e-3,
        l2: float = 0.0,
        dropout: float = 0.0,
        batch_size: int = 512,
        epochs: int = 30,
        seed: int = 0,
        c: int = 20,
        k: int = 1,
        m_max: int = 50,
        gate_hidden: int | None = None,
        score_scale: bool = False,
        cross_modal_codes: bool = True,
        finetune_codes: bool = True,
        use_position: bool = True,
        use_type: bool = True,
        clip_norm: float = 5.0,
        validation: bool = True,
        dtype: str = "float32",
    ):
        self.d = d
        self.layers = layers
        self.aggregator = aggregator
        self.lr = lr
        self.l2 = l2
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.c = c
        self.k = k
        self.m_max = m_max
        self.gate_hidden = gate_hidden
        self.score_scale = score_scale
        self.cross_modal_codes = cross_modal_codes
        self.finetune_codes = finetune_codes
        self.use_position = use_position
        self.use_type = use_type
        self.clip_norm = clip_norm
        self.validation = validation
        self.dtype = dtype

    # -- construction ------------------------------------------------------

    def build(self, split: SplitDataset, codebooks: dict[str, ModalityCodebook] | None = None):
        """Materialize vocab, tables, and propagation parameters (no training)."""
        codebooks = dict(codebooks or {})
        dtype = _torch_dtype(self.dtype)
        self.vocab_ = split.vocab()
        self.catalog_ = split.catalog
        self.codebooks_ = codebooks

        def centers_of(channel):
            book = codebooks.get(channel)
            if book is None:
                return 0, None
            require(
                book.centers.shape[1] == self.d,
                f"codebook latent dim {book.centers.shape[1]} != embedding dim {self.d}",
            )
            return book.c, book.centers

        n_img, img_centers = centers_of("image")
        n_txt, txt_centers = centers_of("text")
        self.tables_ = EmbeddingTables(
            n_items=len(self.catalog_),
            d=self.d,
            m_max=self.m_max,
            n_image_codes=n_img,
            n_text_codes=n_txt,
            image_centers=img_centers,
            text_centers=txt_centers,
            seed=self.seed,
            finetune_codes=self.finetune_codes,
            use_position=self.use_position,
            use_type=self.use_type,
            dtype=dtype,
        )
        self.params_ = PropagationParams(
            d=self.d,
            layers=self.layers,
            gate_hidden=self.gate_hidden,
            seed=self.seed + 1,
            dtype=dtype,
        )
        self.edge_usage_ = {}
        return self

    def _encode_points(
        self, points: list[SplitPoint], codebooks: dict[str, ModalityCodebook] | None = None
    ) -> tuple[list[GraphArrays], np.ndarray]:
        books = self.codebooks_ if codebooks is None else codebooks
        arrays = [
            encode_graph(
                build_graph(p.prefix[-self.m_max:], books, self.cross_modal_codes), self.vocab_
            )
            for p in points
        ]
        targets = np.asarray([self.vocab_[p.target] for p in points], dtype=np.int64)
        return arrays, targets

    def _forward(self, batch: GraphBatch, training: bool, capture: dict | None = None) -> torch.Tensor:
        h0 = initial_states(batch, self.tables_)
        h = propagate(
            batch,
            h0,
            self.params_,
            self.layers,
            self.aggregator,
            dropout=self.dropout,
            training=training,
            score_scale=self.score_scale,
            usage=self.edge_usage_,
            capture=capture,
        )
        return score_items(last_pool(h, batch), self.tables_.item_table)

    def _batches(self, n: int, order: np.ndarray | None = None):
        idx = np.arange(n) if order is None else order
        for start in range(0, n, self.batch_size):
            yield idx[start : start + self.batch_size]

    # -- training ----------------------------------------------------------

    def fit(
        self,
        split: SplitDataset,
        codebooks: dict[str, ModalityCodebook] | None = None,
        log_path: str | Path | None = None,
    ):
        self.build(split, codebooks)
        torch.manual_seed(self.seed)

        train_points = list(split.train)
        val_points: list[SplitPoint] = []
        if self.validation:
            last_of_user: dict[str, int] = {}
            for i, p in enumerate(train_points):
                last_of_user[p.user] = i
            counts: dict[str, int] = {}
            for p in train_points:
                counts[p.user] = counts.get(p.user, 0) + 1
            held = {i for u, i in last_of_user.items() if counts[u] >= 2}
            val_points = [p for i, p in enumerate(train_points) if i in held]
            train_points = [p for i, p in enumerate(train_points) if i not in held]

        arrays, targets = self._encode_points(train_points)
        val_arrays, val_targets = self._encode_points(val_points) if val_points else ([], None)
        node_counts = [g.n_nodes for g in arrays]
        self.graph_stats_ = {
            "n_graphs": len(arrays),
            "mean_nodes": float(np.mean(node_counts)) if node_counts else 0.0,
            "max_nodes": int(max(node_counts)) if node_counts else 0,
        }

        trainable = [p for p in self._parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(trainable, lr=self.lr, betas=(0.9, 0.999), eps=1e-8)
        shuffle_gen = torch.Generator().manual_seed(self.seed)

        self.log_ = []
        best = (-1.0, -1)  # (val hr@5, epoch); ties resolve to the earlier epoch
        best_state = None
        log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            for epoch in range(self.epochs):
                tick = time.perf_counter()
                order = torch.randperm(len(arrays), generator=shuffle_gen).numpy()
                total_loss, total_n = 0.0, 0
                for batch_idx in self._batches(len(arrays), order):
                    batch = GraphBatch.from_graphs([arrays[i] for i in batch_idx])
                    target = torch.from_numpy(targets[batch_idx])
                    logits = self._forward(batch, training=True)
                    loss = xent_loss(logits, target)
                    if self.l2 > 0.0:
                        loss = loss + self.l2 * l2_penalty(trainable)
                    if not torch.isfinite(loss):
                        raise TrainingDiverged(
                            f"non-finite loss {float(loss.detach())!r} at epoch {epoch} "
                            f"(lr={self.lr}, aggregator={self.aggregator})"
                        )
                    optimizer.zero_grad()
                    loss.backward()
                    if self.clip_norm:
                        torch.nn.utils.clip_grad_norm_(trainable, self.clip_norm)
                    optimizer.step()
                    total_loss += float(loss.detach()) * len(batch_idx)
                    total_n += len(batch_idx)

                entry = {
                    "epoch": epoch,
                    "train_loss": total_loss / max(total_n, 1),
                    "val_hr5": None,
                    "val_mrr5": None,
                    "wall_ms": int((time.perf_counter() - tick) * 1000),
                }
                if val_arrays:
                    report = self._evaluate_encoded(val_arrays, val_targets, ks=(5,))
                    entry["val_hr5"] = report.hr[5]
                    entry["val_mrr5"] = report.mrr[5]
                    if report.hr[5] > best[0]:
                        best = (report.hr[5], epoch)
                        best_state = {k: v.detach().clone() for k, v in self._state().items()}
                self.log_.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
        finally:
            if log_fh:
                log_fh.close()

        self.best_epoch_ = best[1] if best_state is not None else self.epochs - 1
        if best_state is not None:
            self._load_state(best_state)
        return self

    # -- inference ---------------------------------------------------------

    def _evaluate_encoded(self, arrays, targets, ks=(5, 20), config=None) -> MetricReport:
        runs = []
        with torch.no_grad():
            for batch_idx in self._batches(len(arrays)):
                batch = GraphBatch.from_graphs([arrays[i] for i in batch_idx])
                logits = self._forward(batch, training=False).numpy()
                runs.extend((logits[row], int(targets[i])) for row, i in enumerate(batch_idx))
        return rank_metrics(runs, ks=ks, config=config or {}, seed=self.seed)

    def evaluate(
        self,
        points: list[SplitPoint],
        ks=(5, 20),
        codebooks: dict[str, ModalityCodebook] | None = None,
        config: dict | None = None,
    ) -> MetricReport:
        arrays, targets = self._encode_points(points, codebooks)
        return self._evaluate_encoded(arrays, targets, ks=ks, config=config)

    def score_prefixes(
        self, prefixes: list[tuple[str, ...]], codebooks: dict[str, ModalityCodebook] | None = None
    ) -> np.ndarray:
        books = self.codebooks_ if codebooks is None else codebooks
        arrays = [
            encode_graph(
                build_graph(tuple(p)[-self.m_max:], books, self.cross_modal_codes), self.vocab_
            )
            for p in prefixes
        ]
        out = []
        with torch.no_grad():
            for batch_idx in self._batches(len(arrays)):
                batch = GraphBatch.from_graphs([arrays[i] for i in batch_idx])
                out.append(self._forward(batch, training=False).numpy())
        return np.concatenate(out, axis=0)

    def predict(self, prefixes: list[tuple[str, ...]], k: int = 5) -> list[list[str]]:
        logits = self.score_prefixes(prefixes)
        top = []
        for row in logits:
            order = np.lexsort((np.arange(len(row)), -row))[:k]
            top.append([self.catalog_[i] for i in order])
        return top

    def gate_report(
        self, prefixes: list[tuple[str, ...]], codebooks: dict[str, ModalityCodebook] | None = None
    ) -> list[dict]:
        """Per-node gate scores for each prefix (han aggregator), JSON-ready."""
        books = self.codebooks_ if codebooks is None else codebooks
        reports = []
        with torch.no_grad():
            for i, prefix in enumerate(prefixes):
                graph = build_graph(tuple(prefix)[-self.m_max:], books, self.cross_modal_codes)
                batch = GraphBatch.from_graphs([encode_graph(graph, self.vocab_)])
                capture: dict = {}
                self._forward(batch, training=False, capture=capture)
                betas = capture.get("gate_beta", [])
                nodes = [
                    {
                        "type": key.ntype.name,
                        "id": key.ref,
                        "beta_per_layer": [
                            [float(b[n, 0]), float(b[n, 1])] for b in betas
                        ],
                    }
                    for n, key in enumerate(graph.nodes)
                ]
                reports.append({"prefix_index": i, "nodes": nodes})
        return reports

    # -- state -------------------------------------------------------------

    def _parameters(self):
        yield from self.tables_.parameters()
        yield from self.params_.parameters()

    def _state(self) -> dict[str, torch.Tensor]:
        state = {f"tables.{k}": v for k, v in self.tables_.state_dict().items()}
        state.update({f"prop.{k}": v for k, v in self.params_.state_dict().items()})
        return state

    def _load_state(self, state: dict[str, torch.Tensor]) -> None:
        self.tables_.load_state_dict(
            {k.removeprefix("tables."): v for k, v in state.items() if k.startswith("tables.")}
        )
        self.params_.load_state_dict(
            {k.removeprefix("prop."): v for k, v in state.items() if k.startswith("prop.")}
        )

    def save_checkpoint(self, path: str | Path) -> None:
        ckpt.save_named_tensors(path, {k: v.numpy() for k, v in self._state().items()})

    def load_checkpoint(self, path: str | Path) -> None:
        dtype = _torch_dtype(self.dtype)
        tensors = {k: torch.as_tensor(v, dtype=dtype) for k, v in ckpt.load_named_tensors(path).items()}
        self._load_state(tensors)
