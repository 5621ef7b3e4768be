"""Per-user modality-enriched sequence graphs.

A graph is built from one prefix of a user's history. Nodes are deduplicated
item nodes plus the modality-code nodes of each present channel, each carrying
the set of 1-based sequence positions it occupies. Edges are typed:

* homogeneous (same node type): transition-in / transition-out between nodes at
  adjacent positions within a channel, merged into bi-directional when the
  transition exists both ways, plus a self-loop on every node;
* heterogeneous: cross-modal correspondence edges, both directions, between all
  pairs of nodes that describe the same item occurrence.

A channel with a missing feature simply contributes no nodes for that item; the
channel's sequential chain skips over the gap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from typing import Mapping, Sequence

from .quantizer import ModalityCodebook
from .validation import require


class NodeType(IntEnum):
    ITEM = 0
    IMAGE_CODE = 1
    TEXT_CODE = 2


class RelationType(IntEnum):
    TRANSITION_IN = 0
    TRANSITION_OUT = 1
    BIDIRECTIONAL = 2
    SELF_LOOP = 3
    CROSS_MODAL = 4


HOMOGENEOUS_RELATIONS = (
    RelationType.TRANSITION_IN,
    RelationType.TRANSITION_OUT,
    RelationType.BIDIRECTIONAL,
    RelationType.SELF_LOOP,
)

_CHANNEL_NODE_TYPE = {"image": NodeType.IMAGE_CODE, "text": NodeType.TEXT_CODE}


@dataclass(frozen=True)
class NodeKey:
    ntype: NodeType
    ref: str | int  # item identifier for ITEM nodes, code index otherwise


@dataclass
class MSGraph:
    nodes: list[NodeKey]
    positions: list[tuple[int, ...]]  # sorted 1-based positions per node
    edges: list[tuple[int, RelationType, int]]  # (src, relation, dst) node indices
    last_item: int  # node index of the item node holding position m
    m: int  # prefix length

    def node_index(self) -> dict[NodeKey, int]:
        return {key: i for i, key in enumerate(self.nodes)}

    def in_edges(self, node: int) -> list[tuple[int, RelationType]]:
        return [(src, rel) for src, rel, dst in self.edges if dst == node]

    def to_json_dict(self) -> dict:
        return {
            "m": self.m,
            "last_item": self.last_item,
            "nodes": [
                {"type": key.ntype.name, "id": key.ref, "positions": list(pos)}
                for key, pos in zip(self.nodes, self.positions)
            ],
            "edges": [
                {"src": src, "rel": rel.name, "dst": dst} for src, rel, dst in self.edges
            ],
        }

    def dump_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def build_graph(
    prefix: Sequence[str],
    codebooks: Mapping[str, ModalityCodebook] | None = None,
    cross_modal_codes: bool = True,
) -> MSGraph:
    """Construct the sequence graph of one prefix; pure in (prefix, codebooks)."""
    require(len(prefix) > 0, "cannot build a graph from an empty prefix")
    codebooks = codebooks or {}
    m = len(prefix)

    node_of: dict[NodeKey, int] = {}
    positions: dict[int, set[int]] = {}

    def intern(key: NodeKey, pos: int) -> int:
        idx = node_of.get(key)
        if idx is None:
            idx = len(node_of)
            node_of[key] = idx
            positions[idx] = set()
        positions[idx].add(pos)
        return idx

    # chains[channel] = list of (position, [node indices at that position])
    chains: dict[str, list[tuple[int, list[int]]]] = {"item": []}
    for channel in sorted(codebooks):
        chains[channel] = []
    groups_at: list[list[list[int]]] = []  # per position, node groups by channel

    for p, item in enumerate(prefix, start=1):
        groups: list[list[int]] = []
        item_idx = intern(NodeKey(NodeType.ITEM, item), p)
        chains["item"].append((p, [item_idx]))
        groups.append([item_idx])
        for channel in sorted(codebooks):
            book = codebooks[channel]
            codes = book.assignments.get(item)
            if not codes:
                continue  # missing modality: no nodes for this occurrence
            ntype = _CHANNEL_NODE_TYPE[channel]
            code_nodes = [intern(NodeKey(ntype, int(code)), p) for code in codes]
            chains[channel].append((p, code_nodes))
            groups.append(code_nodes)
        groups_at.append(groups)

    edges: dict[tuple[int, RelationType, int], None] = {}

    def add(src: int, rel: RelationType, dst: int) -> None:
        edges.setdefault((src, rel, dst), None)

    # Homogeneous transitions: consecutive present positions within a channel;
    # every node of the earlier group connects to every node of the later one.
    # A pair with transitions both ways is relabeled as bi-directional.
    forward: dict[tuple[int, int], None] = {}
    for channel in chains:
        chain = chains[channel]
        for (_, group_a), (_, group_b) in zip(chain, chain[1:]):
            for u in group_a:
                for v in group_b:
                    if u != v:
                        forward.setdefault((u, v), None)
    for u, v in forward:
        if (v, u) in forward:
            add(u, RelationType.BIDIRECTIONAL, v)
            add(v, RelationType.BIDIRECTIONAL, u)
        else:
            add(u, RelationType.TRANSITION_OUT, v)
            add(v, RelationType.TRANSITION_IN, u)

    for idx in range(len(node_of)):
        add(idx, RelationType.SELF_LOOP, idx)

    # Heterogeneous: per position, cross-modal edges both ways between all node
    # pairs of different channels (item-image, item-text, and image-text unless
    # disabled for ablation).
    for groups in groups_at:
        for gi in range(len(groups)):
            for gj in range(gi + 1, len(groups)):
                if not cross_modal_codes and gi > 0:
                    continue  # gi==0 is the item group; code-code pairs skipped
                for u in groups[gi]:
                    for v in groups[gj]:
                        add(u, RelationType.CROSS_MODAL, v)
                        add(v, RelationType.CROSS_MODAL, u)

    nodes = [key for key, _ in sorted(node_of.items(), key=lambda kv: kv[1])]
    last_item = node_of[NodeKey(NodeType.ITEM, prefix[-1])]
    return MSGraph(
        nodes=nodes,
        positions=[tuple(sorted(positions[i])) for i in range(len(nodes))],
        edges=list(edges),
        last_item=last_item,
        m=m,
    )


def neighbor_sets(
    graph: MSGraph, node: int
) -> tuple[list[tuple[int, RelationType]], list[int]]:
    """Partition a node's in-edges into (homogeneous with relation, heterogeneous)."""
    require(0 <= node < len(graph.nodes), f"node {node} not in graph")
    homo: list[tuple[int, RelationType]] = []
    hetero: list[int] = []
    for src, rel, dst in graph.edges:
        if dst != node:
            continue
        if rel == RelationType.CROSS_MODAL:
            hetero.append(src)
        else:
            homo.append((src, rel))
    return homo, hetero
