"""Differentiable boundary tree training (both gradient variants).

Each chunk builds a boundary tree from the first ``n_build`` embeddings and
then takes ``n_query`` sequential Adam steps, one per query point.  A
query's predicted class distribution comes from its greedy traversal: the
transition into any node is modeled as a softmax over negative scaled
distances among the node, its parent and its siblings, and the class
probability multiplies the path-transition probabilities by the class-
masked mass of the final step.  After normalizing over classes, the whole
path prefix cancels and only the final step's candidates matter, so the
training path computes exactly that reduced form; ``class_log_prob`` keeps
the full path-product evaluation for verification.

Variant ``v1`` treats the tree-node embeddings as constants (gradients
reach the network only through the query); ``v2`` also differentiates
through the tree-node embeddings.  Both share the forward computation, so
their losses agree for identical parameters.
"""

from __future__ import annotations

import numpy as np

from ._base import EmbeddingTrainerBase
from .dbs import set_vote_loss_grads
from .metrics import closeness_weights, row_distances
from .tree import BoundaryTreeClassifier, TraversalTrace

__all__ = [
    "transition_prob",
    "final_step_nodes",
    "class_distribution",
    "class_log_prob",
    "DifferentiableBoundaryTree",
]


def transition_prob(tree, node, query, sigma=1.0):
    """Probability of transitioning into ``node`` from its parent.

    Softmax of negative scaled distances over the candidate set consisting
    of the parent and all of the parent's children, evaluated at ``node``.
    """
    if tree.parent_[node] < 0:
        raise ValueError("the root has no incoming transition")
    parent = int(tree.parent_[node])
    cand = [parent, *tree.children_of(parent)]
    w = closeness_weights(row_distances(query, tree.points_[cand]), sigma)
    return float(w[cand.index(node)])


def final_step_nodes(tree, trace: TraversalTrace):
    """Node indices that carry class mass for a finished traversal.

    When the search took at least one transition, these are the final
    node's generation (itself plus its siblings).  When the search stopped
    at the root immediately, no transition exists, so the mass falls back
    to the root's own comparison set: the root and its children.
    """
    if trace.visited:
        parent = int(tree.parent_[trace.final_node])
        return np.asarray(tree.children_of(parent), dtype=np.int64)
    return np.asarray([0, *tree.children_of(0)], dtype=np.int64)


def class_distribution(tree, trace, query, sigma, n_classes):
    """Normalized class distribution using only the final traversal step.

    This is the reduced form actually used in training: the weights of the
    mass-carrying nodes, renormalized among themselves and summed per
    class.
    """
    nodes = final_step_nodes(tree, trace)
    w = closeness_weights(row_distances(query, tree.points_[nodes]), sigma)
    return np.bincount(tree.labels_[nodes], weights=w, minlength=n_classes)


def class_log_prob(tree, trace, query, sigma, n_classes):
    """Full path-product class probabilities for a traversal.

    Sums the log transition probabilities along the visited path (all but
    the final transition), adds the log of the class-masked mass of the
    final step, and exp-normalizes.  Classes with zero final-step mass get
    log-probability ``-inf`` and exactly zero normalized probability.

    Returns:
        (log_p_star, distribution): The unnormalized log-probability
        vector and the normalized distribution over ``n_classes``.
    """
    prefix = 0.0
    for i in trace.visited[:-1]:
        prefix += np.log(transition_prob(tree, i, query, sigma))
    if trace.visited:
        final = trace.visited[-1]
        parent = int(tree.parent_[final])
        generation = tree.children_of(parent)
        cand = [parent, *generation]
        w = closeness_weights(row_distances(query, tree.points_[cand]), sigma)
        mass = np.bincount(
            tree.labels_[generation], weights=w[1:], minlength=n_classes
        )
    else:
        cand = [0, *tree.children_of(0)]
        w = closeness_weights(row_distances(query, tree.points_[cand]), sigma)
        mass = np.bincount(tree.labels_[cand], weights=w, minlength=n_classes)
    with np.errstate(divide="ignore"):
        log_p_star = prefix + np.log(mass)
    shifted = np.exp(log_p_star - log_p_star.max())
    return log_p_star, shifted / shifted.sum()


def _grow_tree(points, labels_idx, n_classes, max_children):
    """Boundary tree over embedded rows, tracking which rows were kept."""
    tree = BoundaryTreeClassifier(max_children=max_children)
    tree._init_store(points.shape[1], np.arange(n_classes), points.dtype)
    node_rows = []
    for i in range(points.shape[0]):
        if tree._insert_idx(points[i], int(labels_idx[i])):
            node_rows.append(i)
    tree.n_nodes_ = tree._n_nodes
    return tree, np.asarray(node_rows, dtype=np.int64)


class DifferentiableBoundaryTree(EmbeddingTrainerBase):
    """Classifier that learns a neural embedding jointly with boundary trees.

    Parameters mirror :class:`~boundarylearn.dbs.DifferentiableBoundarySet`
    with two additions:

        variant: ``"v1"`` freezes the tree-node embeddings when computing
            gradients; ``"v2"`` differentiates through them as well.
        sigma: Defaults (None) to 1.0 for v1 and 60.0 for v2.

    Within a chunk, the tree and all embeddings are computed once from the
    parameters at the start of the chunk; the ``n_query`` sequential Adam
    steps backpropagate against that snapshot, and updated parameters take
    effect at the next chunk.
    """

    def __init__(
        self,
        variant="v1",
        hidden_dims=(400, 400),
        embed_dim=20,
        n_build=1000,
        n_query=1000,
        sigma=None,
        learning_rate=1e-4,
        lr_decay_epochs=(400, 1000, 3000),
        epochs=100,
        eval_every=10,
        patience=20,
        eval_sample_size=10000,
        max_children=None,
        build_final=True,
        metrics_path=None,
        random_state=None,
        dtype=np.float32,
        verbose=0,
    ):
        self.variant = variant
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.n_build = n_build
        self.n_query = n_query
        self.sigma = sigma
        self.learning_rate = learning_rate
        self.lr_decay_epochs = lr_decay_epochs
        self.epochs = epochs
        self.eval_every = eval_every
        self.patience = patience
        self.eval_sample_size = eval_sample_size
        self.max_children = max_children
        self.build_final = build_final
        self.metrics_path = metrics_path
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose

    def _algorithm_name(self):
        return f"dbt_{self.variant}"

    def _net_dims(self, n_features, n_classes):
        return [n_features, *self.hidden_dims, self.embed_dim]

    def _chunk_size(self):
        return self.n_build + self.n_query

    def _effective_sigma(self):
        if self.sigma is not None:
            return self.sigma
        return 1.0 if self.variant == "v1" else 60.0

    def _validate_config(self, n_samples):
        super()._validate_config(n_samples)
        if self.variant not in ("v1", "v2"):
            raise ValueError(f"variant must be 'v1' or 'v2', got {self.variant!r}")
        if self.n_build < 1 or self.n_query < 1:
            raise ValueError("n_build and n_query must be >= 1")
        if self._effective_sigma() <= 0:
            raise ValueError("sigma must be positive")
        if self.n_build + self.n_query > n_samples:
            raise ValueError(
                f"n_build + n_query = {self.n_build + self.n_query} exceeds "
                f"dataset size {n_samples}"
            )

    def _train_step(self, X_chunk, y_idx_chunk, adam):
        sigma = self._effective_sigma()
        emb, tape = self.net_.forward(X_chunk)
        nb = self.n_build
        tree, node_rows = _grow_tree(
            emb[:nb], y_idx_chunk[:nb], len(self.classes_), self.max_children
        )
        total = 0.0
        for r in range(nb, X_chunk.shape[0]):
            trace = tree._traverse(emb[r])
            mass_rows = node_rows[final_step_nodes(tree, trace)]
            loss, query_grad, member_grads = set_vote_loss_grads(
                emb[r : r + 1],
                emb[mass_rows],
                y_idx_chunk[r : r + 1],
                y_idx_chunk[mass_rows],
                sigma,
            )
            total += loss
            if self.variant == "v1":
                rows = np.asarray([r])
                out_grad = query_grad
            else:
                rows = np.concatenate(([r], mass_rows))
                out_grad = np.concatenate((query_grad, member_grads), axis=0)
            grads, _ = self.net_.backward(tape.take(rows), out_grad)
            adam.step(self.net_, grads)
        return total / (X_chunk.shape[0] - nb), tree.n_nodes_
