"""Early- and late-fusion sequence baselines over the channel embedding tensor.

Both read the same 3-channel inputs (item embedding, mean image-code embedding,
mean text-code embedding per position; zeros for missing modalities) and differ
only in when channels merge:

* early: per position, concat channels -> linear + LeakyReLU -> one recurrent
  encoder over positions -> last state is the user representation;
* late: one recurrent encoder per channel over positions -> concat the three
  last states -> linear + LeakyReLU.

The encoder is a single GRU; ``encoder="identity"`` (take the last input) exists
for the degenerate length-1 equivalence check.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn
from torch.nn import functional as F

from .data import SplitDataset, SplitPoint
from .metrics import MetricReport, rank_metrics
from .model import TrainingDiverged, _torch_dtype, l2_penalty, score_items, xent_loss
from .propagation import LEAKY_SLOPE
from .quantizer import ModalityCodebook
from .validation import require

CHANNEL_ROWS = ("item", "image", "text")


class _FusionNet(nn.Module):
    def __init__(self, n_items, n_image_codes, n_text_codes, d, mode, encoder,
                 image_centers=None, text_centers=None, seed=0, dtype=torch.float32):
        super().__init__()
        require(mode in ("early", "late"), f"mode must be early or late, got {mode!r}")
        require(encoder in ("gru", "identity"), f"unknown encoder {encoder!r}")
        self.mode = mode
        self.encoder = encoder
        self.d = d

        bound = 1.0 / math.sqrt(d)
        gen = torch.Generator().manual_seed(seed)

        def uniform(*shape):
            t = torch.empty(*shape, dtype=dtype)
            t.uniform_(-bound, bound, generator=gen)
            return nn.Parameter(t)

        def code_table(n_codes, centers):
            if centers is not None:
                return nn.Parameter(torch.as_tensor(np.asarray(centers), dtype=dtype).clone())
            t = torch.empty(n_codes, d, dtype=dtype)
            if n_codes:
                t.uniform_(-bound, bound, generator=gen)
            return nn.Parameter(t)

        self.item_table = uniform(n_items, d)
        self.image_code_table = code_table(n_image_codes, image_centers)
        self.text_code_table = code_table(n_text_codes, text_centers)
        self.merge = uniform(3 * d, d)
        if encoder == "gru":
            if mode == "early":
                self.rnn = nn.GRU(d, d, batch_first=True, dtype=dtype)
            else:
                self.rnn = nn.ModuleList(
                    [nn.GRU(d, d, batch_first=True, dtype=dtype) for _ in CHANNEL_ROWS]
                )

    def _encode(self, rnn, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Last valid output of the encoder over right-padded (B, L, d) tokens."""
        out = tokens if self.encoder == "identity" else rnn(tokens)[0]
        gather = (lengths - 1).view(-1, 1, 1).expand(-1, 1, out.shape[2])
        return out.gather(1, gather).squeeze(1)

    def _channel_tokens(self, item_idx, img_idx, img_missing, txt_idx, txt_missing):
        e_item = self.item_table[item_idx]
        e_img = (
            self.image_code_table[img_idx].mean(dim=2)
            if self.image_code_table.shape[0]
            else torch.zeros_like(e_item)
        )
        e_txt = (
            self.text_code_table[txt_idx].mean(dim=2)
            if self.text_code_table.shape[0]
            else torch.zeros_like(e_item)
        )
        e_img = e_img * (~img_missing).unsqueeze(-1).to(e_item.dtype)
        e_txt = e_txt * (~txt_missing).unsqueeze(-1).to(e_item.dtype)
        return e_item, e_img, e_txt

    def user_repr(self, item_idx, img_idx, img_missing, txt_idx, txt_missing, lengths,
                  dropout=0.0, training=False) -> torch.Tensor:
        channels = self._channel_tokens(item_idx, img_idx, img_missing, txt_idx, txt_missing)
        if self.mode == "early":
            tokens = F.leaky_relu(torch.cat(channels, dim=2) @ self.merge, LEAKY_SLOPE)
            if training and dropout > 0.0:
                tokens = F.dropout(tokens, p=dropout, training=True)
            return self._encode(self.rnn if self.encoder == "gru" else None, tokens, lengths)
        states = []
        for row, tokens in enumerate(channels):
            rnn = self.rnn[row] if self.encoder == "gru" else None
            states.append(self._encode(rnn, tokens, lengths))
        stacked = torch.cat(states, dim=1)
        if training and dropout > 0.0:
            stacked = F.dropout(stacked, p=dropout, training=True)
        return F.leaky_relu(stacked @ self.merge, LEAKY_SLOPE)

    def forward(self, *args, dropout=0.0, training=False):
        return score_items(self.user_repr(*args, dropout=dropout, training=training), self.item_table)


class FusionBaseline(BaseEstimator):
    """Minimal sequential recommender with an early or late channel-fusion stage."""

    def __init__(
        self,
        mode: str = "early",
        d: int = 32,
        lr: float = 3e-3,
        l2: float = 0.0,
        dropout: float = 0.0,
        batch_size: int = 256,
        epochs: int = 20,
        seed: int = 0,
        m_max: int = 50,
        encoder: str = "gru",
        clip_norm: float = 5.0,
        dtype: str = "float32",
    ):
        self.mode = mode
        self.d = d
        self.lr = lr
        self.l2 = l2
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.m_max = m_max
        self.encoder = encoder
        self.clip_norm = clip_norm
        self.dtype = dtype

    # -- data plumbing -----------------------------------------------------

    def _code_matrix(self, codebooks, channel) -> tuple[np.ndarray, np.ndarray]:
        """(|V|, k) code indices (0 where missing) and a (|V|,) missing mask."""
        book: ModalityCodebook | None = (codebooks or {}).get(channel)
        n = len(self.catalog_)
        if book is None:
            return np.zeros((n, 1), dtype=np.int64), np.ones(n, dtype=bool)
        codes = np.zeros((n, book.k), dtype=np.int64)
        missing = np.ones(n, dtype=bool)
        for i, item in enumerate(self.catalog_):
            assigned = book.assignments.get(item)
            if assigned:
                codes[i] = assigned
                missing[i] = False
        return codes, missing

    def _collate(self, points: list[SplitPoint], code_mats) -> dict:
        ids = [[self.vocab_[i] for i in p.prefix[-self.m_max:]] for p in points]
        lengths = np.asarray([len(s) for s in ids], dtype=np.int64)
        L = int(lengths.max())
        item_idx = np.zeros((len(ids), L), dtype=np.int64)
        valid = np.zeros((len(ids), L), dtype=bool)
        for r, seq in enumerate(ids):
            item_idx[r, : len(seq)] = seq
            valid[r, : len(seq)] = True
        out = {"item_idx": item_idx, "lengths": lengths}
        for channel in ("image", "text"):
            codes, missing = code_mats[channel]
            out[f"{channel}_idx"] = codes[item_idx]
            out[f"{channel}_missing"] = missing[item_idx] | ~valid
        out["targets"] = np.asarray([self.vocab_[p.target] for p in points], dtype=np.int64)
        return out

    @staticmethod
    def _tensors(collated):
        t = torch.as_tensor
        return (
            t(collated["item_idx"]),
            t(collated["image_idx"]),
            t(collated["image_missing"]),
            t(collated["text_idx"]),
            t(collated["text_missing"]),
            t(collated["lengths"]),
        )

    # -- training ----------------------------------------------------------

    def fit(self, split: SplitDataset, codebooks: dict[str, ModalityCodebook] | None = None):
        codebooks = dict(codebooks or {})
        torch.manual_seed(self.seed)
        self.vocab_ = split.vocab()
        self.catalog_ = split.catalog
        self.codebooks_ = codebooks

        def centers_of(channel):
            book = codebooks.get(channel)
            if book is None:
                return 0, None
            require(book.centers.shape[1] == self.d, "codebook latent dim != embedding dim")
            return book.c, book.centers

        n_img, img_centers = centers_of("image")
        n_txt, txt_centers = centers_of("text")
        self.net_ = _FusionNet(
            n_items=len(self.catalog_),
            n_image_codes=n_img,
            n_text_codes=n_txt,
            d=self.d,
            mode=self.mode,
            encoder=self.encoder,
            image_centers=img_centers,
            text_centers=txt_centers,
            seed=self.seed,
            dtype=_torch_dtype(self.dtype),
        )
        code_mats = {ch: self._code_matrix(codebooks, ch) for ch in ("image", "text")}

        optimizer = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        gen = torch.Generator().manual_seed(self.seed)
        points = list(split.train)
        self.log_ = []
        for epoch in range(self.epochs):
            order = torch.randperm(len(points), generator=gen).numpy()
            total, count = 0.0, 0
            for start in range(0, len(points), self.batch_size):
                chunk = [points[i] for i in order[start : start + self.batch_size]]
                collated = self._collate(chunk, code_mats)
                logits = self.net_(
                    *self._tensors(collated), dropout=self.dropout, training=True
                )
                loss = xent_loss(logits, torch.as_tensor(collated["targets"]))
                if self.l2 > 0.0:
                    loss = loss + self.l2 * l2_penalty(self.net_.parameters())
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={self.lr})")
                optimizer.zero_grad()
                loss.backward()
                if self.clip_norm:
                    torch.nn.utils.clip_grad_norm_(self.net_.parameters(), self.clip_norm)
                optimizer.step()
                total += float(loss.detach()) * len(chunk)
                count += len(chunk)
            self.log_.append({"epoch": epoch, "train_loss": total / max(count, 1)})
        return self

    # -- inference ---------------------------------------------------------

    def score_points(
        self, points: list[SplitPoint], codebooks: dict[str, ModalityCodebook] | None = None
    ) -> np.ndarray:
        books = self.codebooks_ if codebooks is None else codebooks
        code_mats = {ch: self._code_matrix(books, ch) for ch in ("image", "text")}
        out = []
        with torch.no_grad():
            for start in range(0, len(points), self.batch_size):
                chunk = points[start : start + self.batch_size]
                out.append(self.net_(*self._tensors(self._collate(chunk, code_mats))).numpy())
        return np.concatenate(out, axis=0)

    def evaluate(
        self,
        points: list[SplitPoint],
        ks=(5, 20),
        codebooks: dict[str, ModalityCodebook] | None = None,
        config: dict | None = None,
    ) -> MetricReport:
        logits = self.score_points(points, codebooks)
        runs = [(logits[i], self.vocab_[p.target]) for i, p in enumerate(points)]
        return rank_metrics(runs, ks=ks, config=config or {}, seed=self.seed)

    def user_representation(
        self, prefix: tuple[str, ...], codebooks: dict[str, ModalityCodebook] | None = None
    ) -> np.ndarray:
        """P for a single prefix (used by the degenerate-equivalence tests)."""
        books = self.codebooks_ if codebooks is None else codebooks
        code_mats = {ch: self._code_matrix(books, ch) for ch in ("image", "text")}
        point = SplitPoint(user="_", prefix=tuple(prefix), target=self.catalog_[0])
        with torch.no_grad():
            P = self.net_.user_repr(*self._tensors(self._collate([point], code_mats)))
        return P.squeeze(0).numpy()
