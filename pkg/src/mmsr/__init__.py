"""Modality-enriched sequence-graph recommender.

Per-user histories become typed graphs (item nodes plus clustered modality-code
nodes), propagated by a heterogeneity-aware dual-attention network whose update
gate picks, per node, between homogeneous-first and heterogeneous-first fusion.
"""

from .baselines import FusionBaseline
from .data import (
    InteractionRecord,
    PerturbationConfig,
    SplitDataset,
    SplitPoint,
    core_filter,
    load_interactions,
    perturb,
    split_sequences,
)
from .features import FeatureTable
from .graph import MSGraph, NodeKey, NodeType, RelationType, build_graph, neighbor_sets
from .metrics import MetricReport, rank_metrics
from .model import MMSRRecommender
from .quantizer import CodebookQuantizer, LinearAutoencoder, ModalityCodebook, lloyd_kmeans
from .synthetic import DualPatternSpec, PlantedRuleSpec, synthesize, synthesize_dual

__version__ = "0.1.0"

__all__ = [
    "CodebookQuantizer",
    "DualPatternSpec",
    "FeatureTable",
    "FusionBaseline",
    "InteractionRecord",
    "LinearAutoencoder",
    "MMSRRecommender",
    "MSGraph",
    "MetricReport",
    "ModalityCodebook",
    "NodeKey",
    "NodeType",
    "PerturbationConfig",
    "PlantedRuleSpec",
    "RelationType",
    "SplitDataset",
    "SplitPoint",
    "build_graph",
    "core_filter",
    "load_interactions",
    "lloyd_kmeans",
    "neighbor_sets",
    "perturb",
    "rank_metrics",
    "split_sequences",
    "synthesize",
    "synthesize_dual",
]
