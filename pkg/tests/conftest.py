import numpy as np
import pytest
import torch

from mmsr.data import SplitDataset, SplitPoint
from mmsr.quantizer import ModalityCodebook

# at desk scale the graph ops are tiny; intra-op threading only adds sync cost
torch.set_num_threads(1)


def tiny_codebooks(d=4, c=3, seed=0, items=None, image_missing=(), text_missing=()):
    rng = np.random.default_rng(seed)
    items = items or [f"i{j}" for j in range(8)]
    books = {}
    for channel, missing in (("image", image_missing), ("text", text_missing)):
        books[channel] = ModalityCodebook(
            channel=channel,
            centers=rng.standard_normal((c, d)),
            assignments={
                i: (int(rng.integers(c)),) for i in items if i not in missing
            },
            c=c,
            k=1,
        )
    return books


def tiny_split(n_items=8, n_users=6, seq_len=6, seed=0):
    rng = np.random.default_rng(seed)
    items = [f"i{j}" for j in range(n_items)]
    train, test = [], []
    for u in range(n_users):
        seq = [items[rng.integers(n_items)] for _ in range(seq_len)]
        for t in range(1, seq_len):
            point = SplitPoint(user=f"u{u}", prefix=tuple(seq[:t]), target=seq[t])
            (test if t == seq_len - 1 else train).append(point)
    return SplitDataset(train=train, test=test, catalog=tuple(items))


@pytest.fixture
def small_pipeline():
    split = tiny_split()
    books = tiny_codebooks(items=list(split.catalog), image_missing=("i3",))
    return split, books
