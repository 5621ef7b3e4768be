"""Independent straight-line oracles used by unit and acceptance tests.

Everything here recomputes expected values by a different route than the
implementation: dense matrices instead of scatter ops, per-edge python loops
instead of batched attention, set logic instead of incremental interning.
"""

import numpy as np

from mmsr.graph import RelationType

LEAKY = 0.01


def leaky(x):
    return np.where(x > 0, x, LEAKY * x)


# -- graph construction oracle -------------------------------------------------


def enumerate_graph(prefix, assignments, cross_modal_codes=True):
    """Brute-force node/edge enumeration.

    ``assignments``: {channel: {item: (codes...)}}. Returns (nodes, edges) where
    nodes maps (ntype_name, ref) -> sorted positions and edges is a frozenset of
    (src_key, rel_name, dst_key).
    """
    chan_type = {"image": "IMAGE_CODE", "text": "TEXT_CODE"}
    nodes = {}

    def touch(key, pos):
        nodes.setdefault(key, set()).add(pos)

    occupants = []  # per position: {channel: [keys]}
    for p, item in enumerate(prefix, 1):
        here = {"item": [("ITEM", item)]}
        touch(("ITEM", item), p)
        for channel in sorted(assignments):
            codes = assignments[channel].get(item)
            if not codes:
                continue
            keys = [(chan_type[channel], int(code)) for code in codes]
            here[channel] = keys
            for key in keys:
                touch(key, p)
        occupants.append(here)

    # transitions: consecutive present positions per channel, full bipartite
    transitions = set()
    for channel in ["item"] + sorted(assignments):
        present = [occ[channel] for occ in occupants if channel in occ]
        for a, b in zip(present, present[1:]):
            for u in a:
                for v in b:
                    if u != v:
                        transitions.add((u, v))

    edges = set()
    for u, v in transitions:
        if (v, u) in transitions:
            edges.add((u, "BIDIRECTIONAL", v))
            edges.add((v, "BIDIRECTIONAL", u))
        else:
            edges.add((u, "TRANSITION_OUT", v))
            edges.add((v, "TRANSITION_IN", u))
    for key in nodes:
        edges.add((key, "SELF_LOOP", key))
    for occ in occupants:
        channels = list(occ)
        for i in range(len(channels)):
            for j in range(i + 1, len(channels)):
                if not cross_modal_codes and "item" not in (channels[i], channels[j]):
                    continue
                for u in occ[channels[i]]:
                    for v in occ[channels[j]]:
                        edges.add((u, "CROSS_MODAL", v))
                        edges.add((v, "CROSS_MODAL", u))

    return {k: tuple(sorted(v)) for k, v in nodes.items()}, frozenset(edges)


def graph_as_sets(graph):
    """Project an MSGraph onto the oracle's (nodes, edges) representation."""
    nodes = {
        (key.ntype.name, key.ref): pos for key, pos in zip(graph.nodes, graph.positions)
    }
    keyed = [(key.ntype.name, key.ref) for key in graph.nodes]
    edges = frozenset(
        (keyed[src], rel.name, keyed[dst]) for src, rel, dst in graph.edges
    )
    return nodes, edges


# -- propagation oracles ---------------------------------------------------------


def batch_edges(batch):
    return list(
        zip(batch.edge_src.tolist(), batch.edge_dst.tolist(), batch.edge_rel.tolist())
    )


def gcn_dense_oracle(batch, H, W):
    """LeakyReLU(D^-1/2 A D^-1/2 H W^T) with A[dst, src] = 1 per in-edge."""
    n = batch.n_nodes
    A = np.zeros((n, n))
    for src, dst, _ in batch_edges(batch):
        A[dst, src] = 1.0
    deg = np.maximum(A.sum(axis=1), 1.0)
    Dinv = np.diag(deg ** -0.5)
    return leaky(Dinv @ A @ Dinv @ H @ W.T)


def gat_oracle(batch, H, W, a):
    """Literal per-node loop of the attention equations."""
    n, d = H.shape
    Wh = H @ W.T
    out = np.zeros_like(H)
    in_edges = {i: [] for i in range(n)}
    for src, dst, _ in batch_edges(batch):
        in_edges[dst].append(src)
    for i in range(n):
        if not in_edges[i]:
            continue
        e = np.array([a[:d] @ Wh[i] + a[d:] @ Wh[j] for j in in_edges[i]])
        e = leaky(e)
        w = np.exp(e - e.max())
        alpha = w / w.sum()
        out[i] = sum(al * Wh[j] for al, j in zip(alpha, in_edges[i]))
    return out


def _type_mat(W_t, types, i):
    return W_t[types[i]]


def homo_scores_oracle(batch, H, Wv, a_rel):
    types = batch.node_type.tolist()
    scores = {}
    for src, dst, rel in batch_edges(batch):
        if rel == int(RelationType.CROSS_MODAL):
            continue
        vi = _type_mat(Wv, types, dst) @ H[dst]
        vj = _type_mat(Wv, types, src) @ H[src]
        scores[(src, dst, rel)] = float(a_rel[rel] @ (vi * vj))
    return scores


def hetero_scores_oracle(batch, H, Wq, Wk):
    types = batch.node_type.tolist()
    scores = {}
    for src, dst, rel in batch_edges(batch):
        if rel != int(RelationType.CROSS_MODAL):
            continue
        q = _type_mat(Wq, types, src) @ H[src]
        k = _type_mat(Wk, types, dst) @ H[dst]
        scores[(src, dst)] = float(q @ k)
    return scores


def class_aggregate_oracle(batch, score_H, value_H, Wq, Wk, Wv, a_rel, cls):
    """Per-node loop: softmax within the class's in-edges, values type-mapped."""
    n, d = score_H.shape
    types = batch.node_type.tolist()
    want_cross = cls == "he"
    in_edges = {i: [] for i in range(n)}
    for src, dst, rel in batch_edges(batch):
        if (rel == int(RelationType.CROSS_MODAL)) == want_cross:
            in_edges[dst].append((src, rel))
    out = np.array(score_H, copy=True)
    for i in range(n):
        if not in_edges[i]:
            continue
        scores = []
        for j, rel in in_edges[i]:
            if want_cross:
                scores.append(
                    (_type_mat(Wq, types, j) @ score_H[j]) @ (_type_mat(Wk, types, i) @ score_H[i])
                )
            else:
                vi = _type_mat(Wv, types, i) @ score_H[i]
                vj = _type_mat(Wv, types, j) @ score_H[j]
                scores.append(a_rel[rel] @ (vi * vj))
        scores = np.asarray(scores, dtype=np.float64)
        w = np.exp(scores - scores.max())
        alpha = w / w.sum()
        out[i] = sum(
            al * (_type_mat(Wv, types, j) @ value_H[j]) for al, (j, _) in zip(alpha, in_edges[i])
        )
    return out


def phased_oracle(batch, H, Wq, Wk, Wv, a_rel, order, non_invasive):
    first, second = ("ho", "he") if order == "hohe" else ("he", "ho")
    h1 = class_aggregate_oracle(batch, H, H, Wq, Wk, Wv, a_rel, first)
    value = H if non_invasive else h1
    return class_aggregate_oracle(batch, h1, value, Wq, Wk, Wv, a_rel, second)


def han_oracle(batch, H, Wq, Wk, Wv, a_rel, gw1, gb1, gw2, gb2):
    hohe = phased_oracle(batch, H, Wq, Wk, Wv, a_rel, "hohe", True)
    heho = phased_oracle(batch, H, Wq, Wk, Wv, a_rel, "heho", True)
    out = np.zeros_like(H)
    betas = np.zeros((H.shape[0], 2))
    for i in range(H.shape[0]):
        hidden = leaky(np.concatenate([hohe[i], heho[i]]) @ gw1 + gb1)
        logits = hidden @ gw2 + gb2
        w = np.exp(logits - logits.max())
        beta = w / w.sum()
        betas[i] = beta
        out[i] = beta[0] * hohe[i] + beta[1] * heho[i]
    return out, betas


def sync_oracle(batch, H, Wq, Wk, Wv, a_rel, sw, sb):
    ho = class_aggregate_oracle(batch, H, H, Wq, Wk, Wv, a_rel, "ho")
    he = class_aggregate_oracle(batch, H, H, Wq, Wk, Wv, a_rel, "he")
    return np.concatenate([ho, he], axis=1) @ sw + sb


def xent_oracle(logits, target):
    """Direct 64-bit formula."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    return float(np.log(np.sum(np.exp(shifted))) - shifted[target])
