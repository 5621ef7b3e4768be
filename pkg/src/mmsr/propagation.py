"""Graph propagation: GCN / GAT transcriptions and the gated dual-attention layer.

All layer ops run on a ``GraphBatch`` (the disjoint union of per-user graphs,
node indices offset per graph) so a whole mini-batch propagates as one sparse
operation. Conventions:

* an edge (src, rel, dst) carries information src -> dst, i.e. the in-edges of a
  node are the messages it aggregates;
* homogeneous attention is content-based: a_r . (W_V h_dst * W_V h_src);
* heterogeneous attention is key-value with the query taken from the neighbor
  and the key from the center: (W_Q h_src) . (W_K h_dst);
* softmax normalizes within one relation class over a node's in-edges of that
  class, and a node with no in-edges in a class keeps its running state;
* phased updates recompute attention from the phase-1 states; non-invasive
  phase 2 aggregates value vectors of the original layer input instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .embeddings import EmbeddingTables
from .graph import MSGraph, NodeType, RelationType
from .validation import require

LEAKY_SLOPE = 0.01

AGGREGATORS = ("gcn", "gat", "han", "sync", "ho", "he", "hohe", "heho", "ni_hohe", "ni_heho")

N_NODE_TYPES = len(NodeType)
N_HOMO_RELATIONS = 4  # transition-in / transition-out / bi-directional / self-loop


@dataclass
class GraphArrays:
    """One graph pre-encoded to flat numpy arrays for cheap batch concatenation."""

    node_type: np.ndarray
    embed_index: np.ndarray
    pos_node: np.ndarray
    pos_index: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_rel: np.ndarray
    last_node: int
    n_nodes: int


def encode_graph(graph: MSGraph, vocab: dict[str, int]) -> GraphArrays:
    node_type = np.empty(len(graph.nodes), dtype=np.int64)
    embed_index = np.empty(len(graph.nodes), dtype=np.int64)
    for i, key in enumerate(graph.nodes):
        node_type[i] = int(key.ntype)
        embed_index[i] = vocab[key.ref] if key.ntype == NodeType.ITEM else int(key.ref)
    pos_node = np.concatenate(
        [np.full(len(pos), i, dtype=np.int64) for i, pos in enumerate(graph.positions)]
    )
    pos_index = np.concatenate([np.asarray(pos, dtype=np.int64) for pos in graph.positions])
    edges = np.asarray(
        [(src, dst, int(rel)) for src, rel, dst in graph.edges], dtype=np.int64
    ).reshape(-1, 3)
    return GraphArrays(
        node_type=node_type,
        embed_index=embed_index,
        pos_node=pos_node,
        pos_index=pos_index,
        edge_src=edges[:, 0],
        edge_dst=edges[:, 1],
        edge_rel=edges[:, 2],
        last_node=graph.last_item,
        n_nodes=len(graph.nodes),
    )


class GraphBatch:
    """Disjoint union of graphs with per-class edge indices precomputed."""

    def __init__(self, node_type, embed_index, pos_node, pos_index, edge_src, edge_dst,
                 edge_rel, last_node, n_graphs):
        as_long = lambda a: torch.as_tensor(a, dtype=torch.long)
        self.node_type = as_long(node_type)
        self.embed_index = as_long(embed_index)
        self.pos_node = as_long(pos_node)
        self.pos_index = as_long(pos_index)
        self.edge_src = as_long(edge_src)
        self.edge_dst = as_long(edge_dst)
        self.edge_rel = as_long(edge_rel)
        self.last_node = as_long(last_node)
        self.n_graphs = n_graphs
        self.n_nodes = int(self.node_type.shape[0])
        self.n_edges = int(self.edge_src.shape[0])

        hetero = self.edge_rel == int(RelationType.CROSS_MODAL)
        self.hetero_edges = hetero.nonzero().squeeze(1)
        self.homo_edges = (~hetero).nonzero().squeeze(1)
        # per-class edge endpoints sliced once; layers reuse them every call
        self.class_edges = {
            "ho": (
                self.edge_src[self.homo_edges],
                self.edge_dst[self.homo_edges],
                self.edge_rel[self.homo_edges],
            ),
            "he": (
                self.edge_src[self.hetero_edges],
                self.edge_dst[self.hetero_edges],
                self.edge_rel[self.hetero_edges],
            ),
        }
        self.class_has_neighbor = {}
        for cls, (_, dst, _) in self.class_edges.items():
            has = torch.zeros(self.n_nodes, dtype=torch.bool)
            has[dst] = True
            self.class_has_neighbor[cls] = has
        ones = torch.ones(self.n_edges)
        self.in_degree = torch.zeros(self.n_nodes).index_add(0, self.edge_dst, ones)
        self.pos_count = torch.zeros(self.n_nodes).index_add(
            0, self.pos_node, torch.ones(self.pos_node.shape[0])
        )

    @staticmethod
    def from_graphs(graphs: list[GraphArrays]) -> "GraphBatch":
        require(len(graphs) > 0, "cannot batch zero graphs")
        node_offset = 0
        parts = {k: [] for k in ("nt", "ei", "pn", "pi", "es", "ed", "er", "ln")}
        for g in graphs:
            parts["nt"].append(g.node_type)
            parts["ei"].append(g.embed_index)
            parts["pn"].append(g.pos_node + node_offset)
            parts["pi"].append(g.pos_index)
            parts["es"].append(g.edge_src + node_offset)
            parts["ed"].append(g.edge_dst + node_offset)
            parts["er"].append(g.edge_rel)
            parts["ln"].append(g.last_node + node_offset)
            node_offset += g.n_nodes
        cat = np.concatenate
        return GraphBatch(
            node_type=cat(parts["nt"]),
            embed_index=cat(parts["ei"]),
            pos_node=cat(parts["pn"]),
            pos_index=cat(parts["pi"]),
            edge_src=cat(parts["es"]),
            edge_dst=cat(parts["ed"]),
            edge_rel=cat(parts["er"]),
            last_node=np.asarray(parts["ln"], dtype=np.int64),
            n_graphs=len(graphs),
        )


class PropagationParams(nn.Module):
    """All per-layer trainable tensors of every aggregator variant.

    Stacked with a leading layer dimension: shared transform W and the GAT
    attention vector; per-node-type query/key/value maps; one relation vector
    per homogeneous relation; the gate MLP; and the synchronous 2d->d merge.
    """

    def __init__(self, d: int, layers: int, gate_hidden: int | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        require(layers >= 1, "need at least one layer")
        self.d = d
        self.layers = layers
        dg = gate_hidden or d
        bound = 1.0 / math.sqrt(d)
        gen = torch.Generator().manual_seed(seed)

        def uniform(*shape) -> nn.Parameter:
            t = torch.empty(*shape, dtype=dtype)
            t.uniform_(-bound, bound, generator=gen)
            return nn.Parameter(t)

        zeros = lambda *shape: nn.Parameter(torch.zeros(*shape, dtype=dtype))

        self.W = uniform(layers, d, d)
        self.gat_a = uniform(layers, 2 * d)
        self.W_Q = uniform(layers, N_NODE_TYPES, d, d)
        self.W_K = uniform(layers, N_NODE_TYPES, d, d)
        self.W_V = uniform(layers, N_NODE_TYPES, d, d)
        self.a_rel = uniform(layers, N_HOMO_RELATIONS, d)
        self.gate_w1 = uniform(layers, 2 * d, dg)
        self.gate_b1 = zeros(layers, dg)
        self.gate_w2 = uniform(layers, dg, 2)
        self.gate_b2 = zeros(layers, 2)
        self.sync_w = uniform(layers, 2 * d, d)
        self.sync_b = zeros(layers, d)


def typed_transform(states: torch.Tensor, node_type: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Apply the per-node-type matrix of ``weight`` (T, d, d) to each row of states."""
    # one batched matmul over all T types, then pick each node's own row
    per_type = torch.einsum("tij,nj->tni", weight, states)
    return per_type[node_type, torch.arange(states.shape[0])]


def segment_softmax(scores: torch.Tensor, segment: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Softmax of ``scores`` within each segment (max-shifted for stability)."""
    seg_max = torch.full((n_segments,), -torch.inf, dtype=scores.dtype).scatter_reduce(
        0, segment, scores.detach(), reduce="amax", include_self=True
    )
    ex = torch.exp(scores - seg_max[segment])
    denom = torch.zeros(n_segments, dtype=scores.dtype).index_add(0, segment, ex)
    return ex / denom[segment]


def _select_edges(batch: GraphBatch, edge_idx: torch.Tensor):
    return batch.edge_src[edge_idx], batch.edge_dst[edge_idx], batch.edge_rel[edge_idx]


def homo_scores(batch: GraphBatch, states: torch.Tensor, params: PropagationParams, l: int,
                edge_idx: torch.Tensor | None = None) -> torch.Tensor:
    """Content-based scores a_r . (W_V h_dst * W_V h_src) over homogeneous edges."""
    edge_idx = batch.homo_edges if edge_idx is None else edge_idx
    src, dst, rel = _select_edges(batch, edge_idx)
    require(
        bool((rel != int(RelationType.CROSS_MODAL)).all()),
        "homo_scores received a heterogeneous edge",
    )
    value = typed_transform(states, batch.node_type, params.W_V[l])
    return (params.a_rel[l][rel] * (value[dst] * value[src])).sum(dim=1)


def hetero_scores(batch: GraphBatch, states: torch.Tensor, params: PropagationParams, l: int,
                  edge_idx: torch.Tensor | None = None) -> torch.Tensor:
    """Key-value scores (W_Q h_src) . (W_K h_dst) over heterogeneous edges."""
    edge_idx = batch.hetero_edges if edge_idx is None else edge_idx
    src, dst, rel = _select_edges(batch, edge_idx)
    require(
        bool((rel == int(RelationType.CROSS_MODAL)).all()),
        "hetero_scores received a homogeneous edge",
    )
    query = typed_transform(states, batch.node_type, params.W_Q[l])
    key = typed_transform(states, batch.node_type, params.W_K[l])
    return (query[src] * key[dst]).sum(dim=1)


def class_aggregate(
    batch: GraphBatch,
    states: torch.Tensor,
    params: PropagationParams,
    l: int,
    cls: str,
    value_states: torch.Tensor | None = None,
    score_scale: bool = False,
    usage: dict | None = None,
    capture: dict | None = None,
) -> torch.Tensor:
    """Attention-weighted sum of type-transformed neighbor values for one class.

    ``states`` feeds the attention scores and is the passthrough for nodes with
    no in-edges of this class; ``value_states`` (default: ``states``) feeds the
    aggregated value vectors.
    """
    require(cls in ("ho", "he"), f"unknown relation class {cls!r}")
    same_states = value_states is None or value_states is states
    value_states = states if value_states is None else value_states
    src, dst, rel = batch.class_edges[cls]
    if usage is not None:
        usage[cls] = usage.get(cls, 0) + int(src.numel())
    if src.numel() == 0:
        return states

    if cls == "ho":
        score_value = typed_transform(states, batch.node_type, params.W_V[l])
        scores = (params.a_rel[l][rel] * (score_value[dst] * score_value[src])).sum(dim=1)
        value = (
            score_value
            if same_states
            else typed_transform(value_states, batch.node_type, params.W_V[l])
        )
    else:
        query = typed_transform(states, batch.node_type, params.W_Q[l])
        key = typed_transform(states, batch.node_type, params.W_K[l])
        scores = (query[src] * key[dst]).sum(dim=1)
        value = typed_transform(value_states, batch.node_type, params.W_V[l])
    if score_scale:
        scores = scores / math.sqrt(params.d)
    alpha = segment_softmax(scores, dst, batch.n_nodes)

    out = torch.zeros_like(states).index_add(0, dst, alpha.unsqueeze(1) * value[src])
    has_neighbor = batch.class_has_neighbor[cls]
    result = torch.where(has_neighbor.unsqueeze(1), out, states)
    if capture is not None:
        capture.update(
            cls=cls,
            alpha=alpha.detach().clone(),
            src=src.clone(),
            dst=dst.clone(),
            values=value.detach().clone(),
            fallback=states.detach().clone(),
            has_neighbor=has_neighbor.clone(),
            out=result.detach().clone(),
        )
    return result


def gcn_layer(batch: GraphBatch, states: torch.Tensor, params: PropagationParams, l: int,
              usage: dict | None = None) -> torch.Tensor:
    """Symmetric-normalized convolution over all in-edges, LeakyReLU output."""
    if usage is not None:
        usage["all"] = usage.get("all", 0) + batch.n_edges
    Wh = states @ params.W[l].T
    deg = batch.in_degree.clamp(min=1.0).to(states.dtype)
    norm = (deg[batch.edge_dst] * deg[batch.edge_src]) ** -0.5
    agg = torch.zeros_like(states).index_add(
        0, batch.edge_dst, Wh[batch.edge_src] * norm.unsqueeze(1)
    )
    return F.leaky_relu(agg, LEAKY_SLOPE)


def gat_layer(batch: GraphBatch, states: torch.Tensor, params: PropagationParams, l: int,
              usage: dict | None = None) -> torch.Tensor:
    """Attention over all in-edges: e = a . [W h_dst ; W h_src], softmax per node."""
    if usage is not None:
        usage["all"] = usage.get("all", 0) + batch.n_edges
    d = params.d
    Wh = states @ params.W[l].T
    e = Wh[batch.edge_dst] @ params.gat_a[l][:d] + Wh[batch.edge_src] @ params.gat_a[l][d:]
    alpha = segment_softmax(F.leaky_relu(e, LEAKY_SLOPE), batch.edge_dst, batch.n_nodes)
    return torch.zeros_like(states).index_add(
        0, batch.edge_dst, alpha.unsqueeze(1) * Wh[batch.edge_src]
    )


def sync_layer(batch: GraphBatch, states: torch.Tensor, params: PropagationParams, l: int,
               score_scale: bool = False, usage: dict | None = None) -> torch.Tensor:
    ho = class_aggregate(batch, states, params, l, "ho", score_scale=score_scale, usage=usage)
    he = class_aggregate(batch, states, params, l, "he", score_scale=score_scale, usage=usage)
    return torch.cat([ho, he], dim=1) @ params.sync_w[l] + params.sync_b[l]


def phased_layer(
    batch: GraphBatch,
    states: torch.Tensor,
    params: PropagationParams,
    l: int,
    order: str,
    non_invasive: bool,
    score_scale: bool = False,
    usage: dict | None = None,
    capture: dict | None = None,
) -> torch.Tensor:
    """Two-phase update. Phase 1 aggregates the first class from the layer input;
    phase 2 scores attention on the phase-1 states and aggregates either those
    states (invasive) or the original layer input (non-invasive)."""
    require(order in ("hohe", "heho"), f"unknown phase order {order!r}")
    first, second = ("ho", "he") if order == "hohe" else ("he", "ho")
    phase1 = class_aggregate(
        batch, states, params, l, first, score_scale=score_scale, usage=usage
    )
    phase2_capture = None if capture is None else {}
    out = class_aggregate(
        batch,
        phase1,
        params,
        l,
        second,
        value_states=states if non_invasive else phase1,
        score_scale=score_scale,
        usage=usage,
        capture=phase2_capture,
    )
    if capture is not None:
        capture.setdefault("phases", []).append(
            {"layer": l, "order": order, "non_invasive": non_invasive, "phase2": phase2_capture}
        )
    return out


def han_layer(
    batch: GraphBatch,
    states: torch.Tensor,
    params: PropagationParams,
    l: int,
    score_scale: bool = False,
    usage: dict | None = None,
    capture: dict | None = None,
) -> torch.Tensor:
    """Gated convex combination of the two non-invasive phase orders."""
    hohe = phased_layer(batch, states, params, l, "hohe", True, score_scale, usage, capture)
    heho = phased_layer(batch, states, params, l, "heho", True, score_scale, usage, capture)
    hidden = F.leaky_relu(
        torch.cat([hohe, heho], dim=1) @ params.gate_w1[l] + params.gate_b1[l], LEAKY_SLOPE
    )
    beta = F.softmax(hidden @ params.gate_w2[l] + params.gate_b2[l], dim=1)
    if capture is not None:
        capture.setdefault("gate_beta", []).append(beta.detach().clone())
    return beta[:, :1] * hohe + beta[:, 1:] * heho


def propagate(
    batch: GraphBatch,
    states: torch.Tensor,
    params: PropagationParams,
    layers: int,
    aggregator: str,
    dropout: float = 0.0,
    training: bool = False,
    score_scale: bool = False,
    usage: dict | None = None,
    capture: dict | None = None,
) -> torch.Tensor:
    """Run ``layers`` propagation steps of the chosen aggregator."""
    require(layers >= 1, "layer count must be >= 1")
    require(aggregator in AGGREGATORS, f"unknown aggregator {aggregator!r}")
    require(layers <= params.layers, "more layers requested than parameterized")
    h = states
    for l in range(layers):
        if aggregator == "gcn":
            h = gcn_layer(batch, h, params, l, usage=usage)
        elif aggregator == "gat":
            h = gat_layer(batch, h, params, l, usage=usage)
        elif aggregator == "ho":
            h = class_aggregate(batch, h, params, l, "ho", score_scale=score_scale, usage=usage)
        elif aggregator == "he":
            h = class_aggregate(batch, h, params, l, "he", score_scale=score_scale, usage=usage)
        elif aggregator == "sync":
            h = sync_layer(batch, h, params, l, score_scale=score_scale, usage=usage)
        elif aggregator in ("hohe", "heho"):
            h = phased_layer(batch, h, params, l, aggregator, False, score_scale, usage, capture)
        elif aggregator in ("ni_hohe", "ni_heho"):
            h = phased_layer(
                batch, h, params, l, aggregator.removeprefix("ni_"), True, score_scale, usage, capture
            )
        else:  # han
            h = han_layer(batch, h, params, l, score_scale, usage, capture)
        if training and dropout > 0.0:
            h = F.dropout(h, p=dropout, training=True)
    return h


def initial_states(batch: GraphBatch, tables: EmbeddingTables) -> torch.Tensor:
    """Merged initial node representations for a whole batch."""
    require(
        int(batch.pos_index.max()) <= tables.m_max,
        f"graph positions exceed m_max={tables.m_max}; truncate prefixes first",
    )
    table, offsets = tables.content_tables()
    content = table[offsets[batch.node_type] + batch.embed_index]
    dtype = tables.dtype

    ty = tables.type_table[batch.node_type]
    if not tables.use_type:
        ty = torch.zeros_like(ty)
    pe = tables.position_table[batch.pos_index]
    sums = torch.zeros(batch.n_nodes, tables.d, dtype=dtype).index_add(0, batch.pos_node, pe)
    po = sums / batch.pos_count.to(dtype).unsqueeze(1)
    if not tables.use_position:
        po = torch.zeros_like(po)
    return torch.cat([content, ty, po], dim=1) @ tables.merge_weight
