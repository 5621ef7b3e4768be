"""Embedding tables and initial node representations.

Every node representation is the merge of three lookups: the content embedding
(item table or a per-channel code table), the node-type embedding, and the mean
of the position embeddings over the node's position set. Code tables are seeded
from the cluster-center vectors produced by the quantizer.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .graph import NodeType
from .validation import require


class EmbeddingTables(nn.Module):
    def __init__(
        self,
        n_items: int,
        d: int,
        m_max: int = 50,
        n_image_codes: int = 0,
        n_text_codes: int = 0,
        image_centers: np.ndarray | None = None,
        text_centers: np.ndarray | None = None,
        seed: int = 0,
        finetune_codes: bool = True,
        use_position: bool = True,
        use_type: bool = True,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        require(d > 0 and n_items > 0 and m_max > 0, "d, n_items, m_max must be positive")
        self.d = d
        self.m_max = m_max
        self.use_position = use_position
        self.use_type = use_type

        bound = 1.0 / math.sqrt(d)
        gen = torch.Generator().manual_seed(seed)

        def uniform(*shape) -> nn.Parameter:
            t = torch.empty(*shape, dtype=dtype)
            t.uniform_(-bound, bound, generator=gen)
            return nn.Parameter(t)

        self.item_table = uniform(n_items, d)
        self.type_table = uniform(len(NodeType), d)
        # Row index equals the 1-based sequence position; row 0 is unused.
        self.position_table = uniform(m_max + 1, d)
        self.merge_weight = uniform(3 * d, d)

        def code_table(n_codes: int, centers: np.ndarray | None) -> nn.Parameter:
            if centers is not None:
                centers = np.asarray(centers)
                require(
                    centers.shape == (n_codes, d),
                    f"code centers must be ({n_codes}, {d}), got {centers.shape}",
                )
                t = torch.as_tensor(centers, dtype=dtype).clone()
            else:
                t = torch.empty(n_codes, d, dtype=dtype)
                if n_codes:
                    t.uniform_(-bound, bound, generator=gen)
            return nn.Parameter(t, requires_grad=finetune_codes)

        self.image_code_table = code_table(n_image_codes, image_centers)
        self.text_code_table = code_table(n_text_codes, text_centers)

    @property
    def dtype(self) -> torch.dtype:
        return self.item_table.dtype

    def content_tables(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Concatenated content table and per-node-type row offsets."""
        table = torch.cat([self.item_table, self.image_code_table, self.text_code_table], dim=0)
        offsets = torch.tensor(
            [0, self.item_table.shape[0], self.item_table.shape[0] + self.image_code_table.shape[0]],
            dtype=torch.long,
        )
        return table, offsets

    def position_mean(self, positions: tuple[int, ...]) -> torch.Tensor:
        require(len(positions) > 0, "position set must be non-empty")
        require(
            all(1 <= p <= self.m_max for p in positions),
            f"positions must lie in [1, m_max={self.m_max}], got {positions}",
        )
        idx = torch.tensor(positions, dtype=torch.long)
        return self.position_table[idx].mean(dim=0)

    def node_repr(self, ntype: NodeType, index: int, positions: tuple[int, ...]) -> torch.Tensor:
        """Merged representation of a single node (used by tests and debugging)."""
        table, offsets = self.content_tables()
        content = table[offsets[int(ntype)] + index]
        ty = self.type_table[int(ntype)]
        if not self.use_type:
            ty = torch.zeros_like(ty)
        po = self.position_mean(positions)
        if not self.use_position:
            po = torch.zeros_like(po)
        return torch.cat([content, ty, po]) @ self.merge_weight


def base_tensor(
    prefix: list[str],
    vocab: dict[str, int],
    tables: EmbeddingTables,
    codebooks: dict | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(3, m, d) channel-by-position embedding tensor plus a (3, m) missing mask.

    Row 0 holds item embeddings; rows 1 and 2 hold the mean of the item's image
    and text code embeddings. A missing modality yields a zero row entry with
    the mask flagged True.
    """
    codebooks = codebooks or {}
    m = len(prefix)
    E = torch.zeros(3, m, tables.d, dtype=tables.dtype)
    missing = torch.zeros(3, m, dtype=torch.bool)
    code_tables = {"image": tables.image_code_table, "text": tables.text_code_table}
    for j, item in enumerate(prefix):
        E[0, j] = tables.item_table[vocab[item]]
        for row, channel in ((1, "image"), (2, "text")):
            book = codebooks.get(channel)
            codes = book.assignments.get(item) if book is not None else None
            if codes:
                idx = torch.tensor(codes, dtype=torch.long)
                E[row, j] = code_tables[channel][idx].mean(dim=0)
            else:
                missing[row, j] = True
    return E, missing
