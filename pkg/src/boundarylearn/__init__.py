"""Boundary trees, forests and sets with learnable neural embeddings.

Classification structures that store only points near class boundaries,
plus trainers that learn a neural transform under which Euclidean distance
reflects label similarity: the differentiable boundary set algorithm and
both differentiable boundary tree gradient variants.
"""

from .baseline import NeuralNetClassifier
from .bset import BoundarySet, boundary_set_indices
from .dbs import DifferentiableBoundarySet
from .dbt import DifferentiableBoundaryTree
from .metrics import (
    brute_force_nn,
    closeness_weights,
    euclidean_distance,
    pairwise_distances,
    row_distances,
)
from .network import Adam, ReluNet, load_checkpoint, lr_at_epoch, save_checkpoint
from .tree import BoundaryForestClassifier, BoundaryTreeClassifier, TraversalTrace

__version__ = "0.1.0"

__all__ = [
    "BoundaryTreeClassifier",
    "BoundaryForestClassifier",
    "BoundarySet",
    "boundary_set_indices",
    "DifferentiableBoundarySet",
    "DifferentiableBoundaryTree",
    "NeuralNetClassifier",
    "TraversalTrace",
    "ReluNet",
    "Adam",
    "lr_at_epoch",
    "save_checkpoint",
    "load_checkpoint",
    "euclidean_distance",
    "row_distances",
    "pairwise_distances",
    "closeness_weights",
    "brute_force_nn",
    "__version__",
]
