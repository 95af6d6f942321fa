"""Differentiable boundary set training.

Each optimization chunk holds ``n_build + n_query`` points.  All of them
are pushed through the network in one batch; a boundary set is grown from
the first ``n_build`` embeddings; every query embedding is then classified
by a softmax-over-distances vote across the whole set, and the mean
cross-entropy descends through the network — through the query embeddings
*and* the kept set-member embeddings.  The keep/discard decisions
themselves are discrete and act as constants for the gradient.

After training, the deployment classifier is a boundary tree built from
all training data under the frozen transform.
"""

from __future__ import annotations

import numpy as np

from ._base import EmbeddingTrainerBase
from .bset import boundary_set_indices
from .metrics import closeness_weights, pairwise_distances

__all__ = ["set_vote_loss_grads", "DifferentiableBoundarySet"]

# Floor applied to the predicted probability of the true class before the
# log.  A query whose class has zero vote mass contributes a large finite
# loss and an exactly zero gradient (the loss is locally flat there).
_PROB_FLOOR = 1e-30


def set_vote_loss_grads(queries, members, query_labels, member_labels, sigma):
    """Cross-entropy of closeness-weighted one-hot votes, with gradients.

    For each query row ``q`` with true label ``y``: ``h`` is the softmax of
    ``-d(q, members)/sigma`` and the predicted probability of class ``c``
    is ``sum_i h_i [member_labels_i == c]``.  The loss is the mean negative
    log-probability of the true labels; gradients flow into the query rows
    and the member rows through the distances.

    Args:
        queries: (n_q, k) embedded query points.
        members: (m, k) embedded set members.
        query_labels, member_labels: Integer class indices.
        sigma: Positive softmax temperature on the distances.

    Returns:
        (loss, query_grads, member_grads): scalar float and arrays shaped
        like ``queries`` and ``members``.
    """
    d = pairwise_distances(queries, members)
    h = closeness_weights(d, sigma)
    same = np.asarray(member_labels)[None, :] == np.asarray(query_labels)[:, None]
    p = np.where(same, h, 0.0).sum(axis=1)
    p_safe = np.maximum(p, _PROB_FLOOR)
    loss = float(-np.mean(np.log(p_safe.astype(np.float64))))

    n_q = queries.shape[0]
    # dL/dh, then the softmax backward gives dL/du for u = -d/sigma.
    h_grad = np.where(same, -1.0 / (n_q * p_safe[:, None]), 0.0).astype(h.dtype)
    inner = (h * h_grad).sum(axis=1, keepdims=True)
    u_grad = h * (h_grad - inner)
    d_grad = u_grad / (-sigma)
    # d = ||q - m|| has gradient (q - m)/d toward the query and its negation
    # toward the member; coincident points get subgradient zero.
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(d > 0, d_grad / d, 0.0)
    query_grads = queries * scale.sum(axis=1)[:, None] - scale @ members
    member_grads = members * scale.sum(axis=0)[:, None] - scale.T @ queries
    return loss, query_grads, member_grads


class DifferentiableBoundarySet(EmbeddingTrainerBase):
    """Classifier that learns a neural embedding jointly with a boundary set.

    Parameters:
        hidden_dims: Hidden ReLU layer widths of the transform.
        embed_dim: Output embedding width.
        n_build: Points per chunk used to grow the boundary set.
        n_query: Query points per chunk; their mean cross-entropy drives
            one Adam step per chunk.
        sigma: Softmax temperature over embedding distances.
        learning_rate: Initial Adam rate.
        lr_decay_epochs: Epochs at which the rate drops by 10x.
        epochs: Maximum epoch count.
        eval_every: Evaluation cadence (epochs) when an eval set is given.
        patience: Evaluations without improvement before stopping early.
        eval_sample_size: Training-point subsample used for the periodic
            evaluation tree (the final tree always uses all points).
        max_children: Child cap for the built trees.
        build_final: Build the all-data deployment tree at the end of fit.
        metrics_path: Optional CSV path; step and eval rows are appended.
        random_state: Seed for the run's root generator.
        dtype: float32 for speed, float64 for gradient-check precision.
        verbose: Print evaluation lines when nonzero.

    Attributes (after fit):
        net_: The trained transform.
        final_tree_: Boundary tree over all embedded training points.
        n_nodes_: Node count of that tree.
        metrics_: Per-step and per-evaluation log records.
    """

    def __init__(
        self,
        hidden_dims=(400, 400),
        embed_dim=20,
        n_build=100,
        n_query=100,
        sigma=60.0,
        learning_rate=1e-3,
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
        return "dbs"

    def _net_dims(self, n_features, n_classes):
        return [n_features, *self.hidden_dims, self.embed_dim]

    def _chunk_size(self):
        return self.n_build + self.n_query

    def _validate_config(self, n_samples):
        super()._validate_config(n_samples)
        if self.n_build < 1 or self.n_query < 1:
            raise ValueError("n_build and n_query must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n_build + self.n_query > n_samples:
            raise ValueError(
                f"n_build + n_query = {self.n_build + self.n_query} exceeds "
                f"dataset size {n_samples}"
            )

    def _train_step(self, X_chunk, y_idx_chunk, adam):
        emb, tape = self.net_.forward(X_chunk)
        nb = self.n_build
        kept = boundary_set_indices(emb[:nb], y_idx_chunk[:nb])
        loss, query_grads, member_grads = set_vote_loss_grads(
            emb[nb:], emb[kept], y_idx_chunk[nb:], y_idx_chunk[kept], self.sigma
        )
        out_grad = np.zeros_like(emb)
        out_grad[nb:] = query_grads
        out_grad[kept] = member_grads
        grads, _ = self.net_.backward(tape, out_grad)
        adam.step(self.net_, grads)
        return loss, kept.shape[0]
