"""Dynamic graph CNN (EdgeConv) for point-cloud classification and segmentation, in NumPy."""

from .edgeconv import EdgeConv
from .graph import NeighborGraph, knn_graph, knn_indices
from .models import (
    ClassifierConfig,
    DGCNNClassifier,
    DGCNNSegmenter,
    SegmenterConfig,
)
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ClassifierConfig",
    "DGCNNClassifier",
    "DGCNNSegmenter",
    "EdgeConv",
    "NeighborGraph",
    "SegmenterConfig",
    "Tape",
    "Tensor",
    "backward",
    "knn_graph",
    "knn_indices",
]
