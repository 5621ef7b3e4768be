"""Modality codes: condense feature vectors, cluster them, assign code sets.

Pipeline per channel: a linear autoencoder compresses raw feature vectors to the
embedding dimension, Lloyd k-means clusters the condensed vectors into ``c``
centers, and each item is assigned the ``k`` centers most cosine-similar to its
condensed vector. Multiple items can share a code and one item maps to ``k``
codes, which is what densifies the per-user sequence graphs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .features import FeatureTable
from .validation import as_float_matrix, require

logger = logging.getLogger(__name__)


class LinearAutoencoder(BaseEstimator, TransformerMixin):
    """Bias-free linear autoencoder fit by full-batch gradient steps on MSE.

    Initialised from the identity slice (encode = first ``latent_dim`` columns
    of I), so when ``latent_dim == dim`` the reconstruction loss is exactly zero
    at step 0. Training is full-batch and therefore deterministic; ``seed`` is
    carried only into config echoes.
    """

    def __init__(self, latent_dim: int, epochs: int = 300, lr: float = 1e-2, seed: int = 0):
        self.latent_dim = latent_dim
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        X = as_float_matrix(X, "autoencoder input")
        n, dim = X.shape
        require(n >= 2, "need at least 2 vectors to fit the autoencoder")
        require(1 <= self.latent_dim <= dim, "latent_dim must be in [1, dim]")

        data = torch.from_numpy(X)
        eye = torch.eye(dim, dtype=torch.float64)
        encode = eye[:, : self.latent_dim].clone().requires_grad_(True)
        decode = eye[: self.latent_dim, :].clone().requires_grad_(True)
        opt = torch.optim.Adam([encode, decode], lr=self.lr)

        def loss_value() -> float:
            with torch.no_grad():
                return float(((data @ encode @ decode - data) ** 2).mean())

        best = loss_value()
        best_state = (encode.detach().clone(), decode.detach().clone())
        history = [best]
        for _ in range(self.epochs):
            opt.zero_grad()
            loss = ((data @ encode @ decode - data) ** 2).mean()
            loss.backward()
            opt.step()
            current = loss_value()
            history.append(current)
            if current < best:
                best = current
                best_state = (encode.detach().clone(), decode.detach().clone())

        self.dim_ = dim
        self.encode_ = best_state[0].numpy()
        self.decode_ = best_state[1].numpy()
        self.loss_history_ = history
        self.final_loss_ = best
        return self

    def transform(self, X) -> np.ndarray:
        X = as_float_matrix(X, "autoencoder input")
        require(X.shape[1] == self.dim_, f"expected dim {self.dim_}, got {X.shape[1]}")
        return X @ self.encode_

    def inverse_transform(self, Z) -> np.ndarray:
        Z = as_float_matrix(Z, "latent input")
        return Z @ self.decode_


def _kmeanspp_init(X: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((c, X.shape[1]), dtype=X.dtype)
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, c):
        total = d2.sum()
        if total <= 0:
            centers[j] = X[rng.integers(n)]
            continue
        probs = d2 / total
        centers[j] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    return centers


def lloyd_kmeans(
    X, c: int, max_iter: int = 100, seed: int = 0
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations with seeded kmeans++ init.

    Returns (centers, labels, sse_history); the SSE log is recorded after every
    assignment step and is non-increasing. Empty clusters are re-seeded to the
    point farthest from its assigned center. Stops at ``max_iter`` or when the
    labels reach a fixpoint.
    """
    X = as_float_matrix(X, "kmeans input")
    n_distinct = np.unique(X, axis=0).shape[0]
    require(1 <= c <= n_distinct, f"need 1 <= c <= distinct vectors ({n_distinct}), got c={c}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(X, c, rng)

    labels = np.full(X.shape[0], -1, dtype=np.int64)
    sse_history: list[float] = []
    for _ in range(max_iter):
        # Assign: nearest center, ties to the lower index (argmin is first-min).
        dists = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        sse_history.append(float(dists[np.arange(X.shape[0]), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        # Update: means; empty cluster -> farthest point from its assigned center
        # (successive farthest points when several clusters are empty at once).
        point_dists = dists[np.arange(X.shape[0]), labels]
        farthest_order = iter(np.argsort(-point_dists))
        for j in range(c):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                centers[j] = X[int(next(farthest_order))]
    return centers, labels, sse_history


def assign_codes(
    vectors: dict[str, np.ndarray], centers: np.ndarray, k: int
) -> dict[str, tuple[int, ...]]:
    """Top-``k`` centers per item by cosine similarity, descending, ties to lower index."""
    centers = as_float_matrix(centers, "centers")
    require(1 <= k <= centers.shape[0], "need 1 <= k <= c")
    center_norms = np.linalg.norm(centers, axis=1)
    zero_warned = False
    assignments: dict[str, tuple[int, ...]] = {}
    for item in sorted(vectors):
        v = np.asarray(vectors[item], dtype=np.float64)
        vn = np.linalg.norm(v)
        denom = vn * center_norms
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = (centers @ v) / denom
        bad = ~np.isfinite(sims)
        if bad.any() or vn == 0.0:
            if not zero_warned:
                logger.warning("zero vector met during code assignment; cosine set to -1")
                zero_warned = True
            sims = np.where(np.isfinite(sims), sims, -1.0)
            if vn == 0.0:
                sims = np.full_like(sims, -1.0)
        order = np.lexsort((np.arange(len(sims)), -sims))
        assignments[item] = tuple(int(i) for i in order[:k])
    return assignments


@dataclass
class ModalityCodebook:
    channel: str
    centers: np.ndarray  # (c, latent_dim)
    assignments: dict[str, tuple[int, ...]]
    c: int
    k: int

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        require(self.centers.shape[0] == self.c, "centers row count must equal c")
        require(1 <= self.k <= self.c, "need 1 <= k <= c")
        for item, codes in self.assignments.items():
            require(
                len(codes) == self.k and len(set(codes)) == self.k,
                f"assignment for {item!r} must hold exactly k distinct codes",
            )
            require(all(0 <= i < self.c for i in codes), f"code index out of range for {item!r}")

    def to_json_dict(self) -> dict:
        return {
            "channel": self.channel,
            "c": self.c,
            "k": self.k,
            "centers": [[float(x) for x in row] for row in self.centers],
            "assignments": {item: list(codes) for item, codes in sorted(self.assignments.items())},
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "ModalityCodebook":
        return ModalityCodebook(
            channel=obj["channel"],
            centers=np.asarray(obj["centers"], dtype=np.float64),
            assignments={item: tuple(codes) for item, codes in obj["assignments"].items()},
            c=obj["c"],
            k=obj["k"],
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @staticmethod
    def load(path: str | Path) -> "ModalityCodebook":
        with open(path, "r", encoding="utf-8") as fh:
            return ModalityCodebook.from_json_dict(json.load(fh))


class CodebookQuantizer(BaseEstimator):
    """Autoencoder + k-means + cosine assignment for one modality channel.

    ``fit`` trains on the given items only (the training split), after which
    ``assign`` maps any item with a feature vector onto the frozen codebook, so
    unseen test items never leak into center estimation.
    """

    def __init__(
        self,
        c: int = 20,
        k: int = 1,
        latent_dim: int = 32,
        ae_epochs: int = 300,
        ae_lr: float = 1e-2,
        kmeans_iters: int = 100,
        seed: int = 0,
    ):
        self.c = c
        self.k = k
        self.latent_dim = latent_dim
        self.ae_epochs = ae_epochs
        self.ae_lr = ae_lr
        self.kmeans_iters = kmeans_iters
        self.seed = seed

    def fit(self, table: FeatureTable, items: list[str] | None = None):
        items = sorted(table.entries) if items is None else sorted(i for i in items if i in table)
        require(len(items) >= 2, "need at least 2 items with features to fit the quantizer")
        X = table.matrix(items)
        self.autoencoder_ = LinearAutoencoder(
            latent_dim=self.latent_dim, epochs=self.ae_epochs, lr=self.ae_lr, seed=self.seed
        ).fit(X)
        Z = self.autoencoder_.transform(X)
        self.centers_, _, self.sse_history_ = lloyd_kmeans(
            Z, self.c, max_iter=self.kmeans_iters, seed=self.seed
        )
        self.channel_ = table.channel
        return self

    @classmethod
    def from_artifacts(
        cls, channel: str, encode: np.ndarray, decode: np.ndarray, centers: np.ndarray, k: int
    ) -> "CodebookQuantizer":
        centers = np.asarray(centers, dtype=np.float64)
        self = cls(c=centers.shape[0], k=k, latent_dim=encode.shape[1])
        self.autoencoder_ = LinearAutoencoder(latent_dim=encode.shape[1])
        self.autoencoder_.dim_ = encode.shape[0]
        self.autoencoder_.encode_ = np.asarray(encode, dtype=np.float64)
        self.autoencoder_.decode_ = np.asarray(decode, dtype=np.float64)
        self.centers_ = centers
        self.channel_ = channel
        return self

    def assign(self, table: FeatureTable, items: list[str] | None = None) -> dict[str, tuple[int, ...]]:
        items = sorted(table.entries) if items is None else [i for i in items if i in table]
        if not items:
            return {}
        Z = self.autoencoder_.transform(table.matrix(items))
        return assign_codes({item: Z[i] for i, item in enumerate(items)}, self.centers_, self.k)

    def build_codebook(self, table: FeatureTable, items: list[str] | None = None) -> ModalityCodebook:
        return ModalityCodebook(
            channel=self.channel_,
            centers=self.centers_,
            assignments=self.assign(table, items),
            c=self.c,
            k=self.k,
        )


def per_item_codebook(
    quantizer: CodebookQuantizer, table: FeatureTable, items: list[str] | None = None
) -> ModalityCodebook:
    """No-codes baseline: every item is its own code, seeded by its condensed vector."""
    items = sorted(table.entries) if items is None else sorted(i for i in items if i in table)
    require(len(items) >= 1, "per-item codebook needs at least one item with features")
    Z = quantizer.autoencoder_.transform(table.matrix(items))
    return ModalityCodebook(
        channel=quantizer.channel_,
        centers=Z,
        assignments={item: (i,) for i, item in enumerate(items)},
        c=len(items),
        k=1,
    )
