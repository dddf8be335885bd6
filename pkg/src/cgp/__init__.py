"""Gradual co-pruning of GNN weights, graph edges and input features."""

from .graph_io import Graph, SbmConfig, SplitSet, generate_sbm, load_dataset, normalize_adjacency
from .sparsifier import PruneSchedule, RegrowthPolicy
from .trainer import TrainConfig, TrainReport, train

__all__ = [
    "Graph", "SbmConfig", "SplitSet", "generate_sbm", "load_dataset", "normalize_adjacency",
    "PruneSchedule", "RegrowthPolicy", "TrainConfig", "TrainReport", "train",
]
__version__ = "0.1.0"
