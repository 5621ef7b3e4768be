"""Synthetic interaction corpora with planted, learnable structure.

Two generators:

* ``synthesize`` plants a single rule: the next item is a deterministic function
  of the current item's latent cluster, flipped to a uniform random item with
  probability ``noise_p``. Items in the same cluster share nearby feature
  vectors in every channel, so the rule is recoverable from modality codes.

* ``synthesize_dual`` plants two competing signals for the fusion-order study:
  an order rule (next item determined by the image cluster of the *last* item)
  and a matching rule (next item determined by the session's image-to-text
  pairing, which is observable only in the per-item joint of the two channels —
  channel marginals are identical across pairings by construction).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataError, InteractionRecord
from .features import IMAGE, TEXT, FeatureTable
from .validation import require


def _item_id(i: int) -> str:
    return f"i{i:05d}"


def _user_id(u: int) -> str:
    return f"u{u:05d}"


def _cluster_means(rng: np.random.Generator, n_clusters: int, dim: int) -> np.ndarray:
    """Orthonormal cluster directions (rows), requires dim >= n_clusters."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_clusters)))
    return q.T.astype(np.float32)


def _feature_tables(
    rng: np.random.Generator,
    clusters: np.ndarray,
    dim: int,
    noise: float,
    channels: tuple[str, ...],
    per_channel_clusters: dict[str, np.ndarray] | None = None,
) -> dict[str, FeatureTable]:
    n_items = len(clusters)
    tables = {}
    for channel in channels:
        z = clusters if per_channel_clusters is None else per_channel_clusters[channel]
        means = _cluster_means(rng, int(z.max()) + 1, dim)
        vecs = means[z] + noise * rng.standard_normal((n_items, dim)).astype(np.float32)
        tables[channel] = FeatureTable(
            channel=channel,
            dim=dim,
            entries={_item_id(i): vecs[i] for i in range(n_items)},
        )
    return tables


@dataclass(frozen=True)
class PlantedRuleSpec:
    n_users: int = 500
    n_items: int = 200
    n_clusters: int = 20
    min_len: int = 8
    max_len: int = 16
    feature_dim: int = 48
    noise_p: float = 0.1
    feature_noise: float = 0.05
    seed: int = 0
    channels: tuple[str, ...] = (IMAGE, TEXT)


@dataclass
class PlantedRuleInfo:
    """Ground truth needed by tests (Bayes predictor, adherence counting)."""

    cluster_of_item: dict[str, int]
    rule_target: dict[int, str]  # cluster index -> next item id
    noise_p: float

    def bayes_next(self, current_item: str) -> str:
        return self.rule_target[self.cluster_of_item[current_item]]


@dataclass
class SynthResult:
    records: list[InteractionRecord]
    features: dict[str, FeatureTable]
    info: object


def synthesize(spec: PlantedRuleSpec) -> SynthResult:
    if spec.n_clusters > spec.n_items:
        raise DataError("infeasible: more clusters than items")
    if spec.n_clusters > spec.feature_dim:
        raise DataError("infeasible: feature_dim must be >= n_clusters for separable clusters")
    require(0.0 <= spec.noise_p <= 1.0, "noise_p must be in [0,1]")
    require(2 <= spec.min_len <= spec.max_len, "need 2 <= min_len <= max_len")
    rng = np.random.default_rng(spec.seed)

    # Round-robin so every cluster is non-empty, then shuffle the assignment.
    clusters = rng.permuted(np.arange(spec.n_items) % spec.n_clusters)
    rule = rng.choice(spec.n_items, size=spec.n_clusters, replace=False)

    records: list[InteractionRecord] = []
    for u in range(spec.n_users):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        current = int(rng.integers(spec.n_items))
        seq = [current]
        for _ in range(length - 1):
            if rng.random() < spec.noise_p:
                current = int(rng.integers(spec.n_items))
            else:
                current = int(rule[clusters[current]])
            seq.append(current)
        records.extend(
            InteractionRecord(user=_user_id(u), item=_item_id(it), ts=t + 1)
            for t, it in enumerate(seq)
        )

    features = _feature_tables(
        rng, clusters, spec.feature_dim, spec.feature_noise, spec.channels
    )
    info = PlantedRuleInfo(
        cluster_of_item={_item_id(i): int(clusters[i]) for i in range(spec.n_items)},
        rule_target={c: _item_id(int(rule[c])) for c in range(spec.n_clusters)},
        noise_p=spec.noise_p,
    )
    return SynthResult(records=records, features=features, info=info)


@dataclass(frozen=True)
class DualPatternSpec:
    n_users: int = 1600
    n_items: int = 3000
    n_clusters: int = 2  # per channel
    n_anchors: int = 8
    n_match_answers: int = 6  # answer-pool size per session
    min_len: int = 7
    max_len: int = 9
    feature_dim: int = 32
    # identity-borne order rule: anchor runs (enter rarely, then follow the ring)
    p_chain_enter: float = 0.05
    p_chain_cont: float = 0.65
    p_order: float = 0.00  # feature-borne order rule (image cluster of last)
    p_noise: float = 0.10
    feature_noise: float = 0.05
    seed: int = 0


@dataclass
class DualPatternInfo:
    image_cluster: dict[str, int]
    text_cluster: dict[str, int]
    anchors: list[str]
    anchor_successor: dict[str, str]
    order_target: dict[int, str]  # image cluster -> item
    match_answers: dict[int, tuple[str, ...]]  # session pairing -> answer pool
    session_of_user: dict[str, int]
    target_items: set[str]


def synthesize_dual(spec: DualPatternSpec) -> SynthResult:
    """Dual-pattern corpus; see module docstring for the two planted signals.

    Design constraints that keep the two signals separable:

    * the order rule is identity-borne: hot anchor items form a successor ring,
      so learning it needs only the id channel and survives feature mismatch
      but dies when the prefix is shuffled;
    * the match rule is feature-borne: the session pairing is visible only in
      per-item (image, text) joints, fillers come from a large cold pool so id
      co-occurrence statistics stay too weak to substitute for features, and
      exactly one match emission happens per sequence so the answer item never
      appears in its own evidence prefix;
    * all special items (anchors, order answers, match answers) are excluded
      from filler/noise draws and share feature cell (0, 0), so channel
      marginals are identical across sessions and special items' own features
      carry nothing.
    """
    c = spec.n_clusters
    n_answers = c * spec.n_match_answers
    n_special = c + n_answers + spec.n_anchors
    require(
        spec.n_items >= c * c + n_special,
        "need n_items >= n_clusters^2 + n_special for populated cells",
    )
    require(spec.feature_dim >= c, "feature_dim must be >= n_clusters")
    require(
        max(spec.p_chain_enter, spec.p_chain_cont) + spec.p_order + spec.p_noise < 1.0,
        "chain/order/noise shares must leave filler mass",
    )
    require(spec.min_len >= 4 and spec.min_len <= spec.max_len, "need 4 <= min_len <= max_len")
    rng = np.random.default_rng(spec.seed)

    order_target = np.arange(c)
    answer_pool = {
        s: np.arange(c + s * spec.n_match_answers, c + (s + 1) * spec.n_match_answers)
        for s in range(c)
    }
    anchors = np.arange(c + n_answers, n_special)
    anchor_set = set(int(a) for a in anchors)
    successor = {int(anchors[i]): int(anchors[(i + 1) % len(anchors)]) for i in range(len(anchors))}
    pool = np.arange(n_special, spec.n_items)

    # Balanced cells over the cold pool; special items all sit in cell (0, 0).
    zi = np.zeros(spec.n_items, dtype=np.int64)
    zt = np.zeros(spec.n_items, dtype=np.int64)
    pool_cells = rng.permuted(np.arange(len(pool)) % (c * c))
    zi[pool] = pool_cells // c
    zt[pool] = pool_cells % c

    # cell_members[s][z] = pool items with image cluster z, text cluster (z+s)%c
    cell_members = [
        [pool[np.flatnonzero((zi[pool] == z) & (zt[pool] == (z + s) % c))] for z in range(c)]
        for s in range(c)
    ]

    records: list[InteractionRecord] = []
    session_of_user: dict[str, int] = {}
    for u in range(spec.n_users):
        s = int(rng.integers(c))
        session_of_user[_user_id(u)] = s
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        match_pos = int(rng.integers(2, length + 1))  # 1-based, in [2, length]

        def filler() -> int:
            z = int(rng.integers(c))
            members = cell_members[s][z]
            return int(members[rng.integers(len(members))])

        seq = [filler()]
        for pos in range(2, length + 1):
            if pos == match_pos:
                answers = answer_pool[s]
                nxt = int(answers[rng.integers(len(answers))])
            else:
                last = seq[-1]
                p_chain = spec.p_chain_cont if last in anchor_set else spec.p_chain_enter
                u01 = rng.random()
                if u01 < p_chain:
                    nxt = successor[last] if last in anchor_set else int(
                        anchors[rng.integers(len(anchors))]
                    )
                elif u01 < p_chain + spec.p_order:
                    nxt = int(order_target[zi[last]])
                elif u01 < p_chain + spec.p_order + spec.p_noise:
                    nxt = int(pool[rng.integers(len(pool))])
                else:
                    nxt = filler()
            seq.append(nxt)
        records.extend(
            InteractionRecord(user=_user_id(u), item=_item_id(it), ts=t + 1)
            for t, it in enumerate(seq)
        )

    features = _feature_tables(
        rng,
        zi,
        spec.feature_dim,
        spec.feature_noise,
        (IMAGE, TEXT),
        per_channel_clusters={IMAGE: zi, TEXT: zt},
    )
    info = DualPatternInfo(
        image_cluster={_item_id(i): int(zi[i]) for i in range(spec.n_items)},
        text_cluster={_item_id(i): int(zt[i]) for i in range(spec.n_items)},
        anchors=[_item_id(int(a)) for a in anchors],
        anchor_successor={_item_id(a): _item_id(b) for a, b in successor.items()},
        order_target={z: _item_id(int(order_target[z])) for z in range(c)},
        match_answers={
            s: tuple(_item_id(int(i)) for i in answer_pool[s]) for s in range(c)
        },
        session_of_user=session_of_user,
        target_items={_item_id(int(i)) for i in range(n_special)},
    )
    return SynthResult(records=records, features=features, info=info)
