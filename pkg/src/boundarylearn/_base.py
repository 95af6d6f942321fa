"""Shared optimization loop for the embedding trainers and the MLP baseline.

Subclasses supply the per-chunk work (``_train_step``), the network shape,
and how validation error is measured; this base owns epoch shuffling, the
learning-rate schedule, periodic evaluation with best-parameter tracking
and early stopping, metrics logging, and final-structure construction.
"""

from __future__ import annotations

import csv
import os
import time
from abc import abstractmethod

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import shuffle_partition
from .network import Adam, ReluNet, embed_batches, lr_at_epoch
from .tree import BoundaryTreeClassifier

_CSV_FIELDS = [
    "algorithm",
    "kind",
    "step",
    "epoch",
    "loss",
    "set_size",
    "lr",
    "wall_ms",
    "test_error",
]


class EmbeddingTrainerBase(ClassifierMixin, BaseEstimator):
    """Template for seeded, schedule-driven Adam training runs.

    All randomness (parameter init, epoch shuffles, evaluation subsample)
    forks from one ``SeedSequence`` rooted at ``random_state``, so a fixed
    seed reproduces a run bitwise in single-threaded mode.
    """

    # -- hooks ----------------------------------------------------------

    @abstractmethod
    def _algorithm_name(self) -> str: ...

    @abstractmethod
    def _net_dims(self, n_features, n_classes) -> list[int]: ...

    @abstractmethod
    def _chunk_size(self) -> int: ...

    @abstractmethod
    def _train_step(self, X_chunk, y_idx_chunk, adam):
        """Run one optimization chunk; returns (loss, structure_size)."""

    def _validate_config(self, n_samples):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def _validation_error(self, X_struct, y_idx_struct, X_eval, y_eval):
        """Test error of a boundary tree built on embedded training points."""
        emb = embed_batches(self.net_, X_struct)
        tree = BoundaryTreeClassifier(max_children=self.max_children)
        tree.fit(emb, y_idx_struct)
        pred_idx = tree.predict(embed_batches(self.net_, X_eval))
        return float(np.mean(self.classes_[pred_idx] != y_eval))

    def _finalize(self, X, y_idx):
        """Build the deployment structure from all training data."""
        emb = embed_batches(self.net_, X)
        self.final_tree_ = BoundaryTreeClassifier(max_children=self.max_children)
        self.final_tree_.fit(emb, y_idx)
        self.n_nodes_ = self.final_tree_.n_nodes_

    # -- logging ----------------------------------------------------------

    def _log(self, **row):
        record = {field: row.get(field, "") for field in _CSV_FIELDS}
        record["algorithm"] = self._algorithm_name()
        self.metrics_.append(record)
        if self._csv_writer is not None:
            self._csv_writer.writerow(record)
            self._csv_file.flush()

    def _open_metrics(self):
        self._csv_file = None
        self._csv_writer = None
        if self.metrics_path:
            fresh = not os.path.exists(self.metrics_path) or os.path.getsize(self.metrics_path) == 0
            self._csv_file = open(self.metrics_path, "a", newline="")
            self._csv_writer = csv.DictWriter(self._csv_file, fieldnames=_CSV_FIELDS)
            if fresh:
                self._csv_writer.writeheader()

    def _close_metrics(self):
        if self._csv_file is not None:
            self._csv_file.close()
        self._csv_file = None
        self._csv_writer = None

    # -- the loop ----------------------------------------------------------

    def fit(self, X, y, eval_set=None, eval_callback=None):
        """Optimize the network on ``(X, y)``.

        Args:
            X, y: Training points and labels; rows are consumed in seeded
                shuffled chunks each epoch, with the ragged tail dropped.
            eval_set: Optional ``(X_test, y_test)``.  When present, the
                error is measured every ``eval_every`` epochs, the best
                parameters are kept, and training stops early after
                ``patience`` evaluations without improvement.
            eval_callback: Optional ``f(epoch, elapsed_s, test_error)``
                invoked after each evaluation (used for timing curves).
        """
        X, y = check_X_y(X, y)
        X = X.astype(self.dtype, copy=False)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        n = X.shape[0]
        self._validate_config(n)

        root = np.random.SeedSequence(self.random_state)
        init_seq, shuffle_seq, sample_seq = root.spawn(3)
        self.net_ = ReluNet(
            self._net_dims(self.n_features_in_, len(self.classes_)),
            rng=np.random.default_rng(init_seq),
            dtype=self.dtype,
        )
        adam = Adam(self.net_, lr=self.learning_rate)
        self.adam_ = adam
        self.metrics_ = []
        self._open_metrics()

        have_eval = eval_set is not None
        if have_eval:
            X_eval, y_eval = check_X_y(*eval_set)
            X_eval = X_eval.astype(self.dtype, copy=False)
            sample_rng = np.random.default_rng(sample_seq)
            if n > self.eval_sample_size:
                struct_idx = np.sort(
                    sample_rng.choice(n, size=self.eval_sample_size, replace=False)
                )
            else:
                struct_idx = np.arange(n)

        shuffle_rng = np.random.default_rng(shuffle_seq)
        best_error = np.inf
        best_snapshot = None
        best_epoch = -1
        intervals_without_improvement = 0
        step = 0
        epochs_run = 0
        t_start = time.perf_counter()
        try:
            for epoch in range(self.epochs):
                adam.lr = lr_at_epoch(epoch, self.learning_rate, tuple(self.lr_decay_epochs))
                for chunk in shuffle_partition(n, self._chunk_size(), shuffle_rng):
                    t_step = time.perf_counter()
                    loss, size = self._train_step(X[chunk], y_idx[chunk], adam)
                    if not np.isfinite(loss):
                        raise ValueError(f"non-finite training loss at step {step}")
                    self._log(
                        kind="step",
                        step=step,
                        epoch=epoch,
                        loss=repr(float(loss)),
                        set_size="" if size is None else int(size),
                        lr=repr(float(adam.lr)),
                        wall_ms=round((time.perf_counter() - t_step) * 1e3, 3),
                    )
                    step += 1
                epochs_run = epoch + 1
                if have_eval and (epoch + 1) % self.eval_every == 0:
                    error = self._validation_error(X[struct_idx], y_idx[struct_idx], X_eval, y_eval)
                    self._log(
                        kind="eval",
                        epoch=epoch,
                        lr=repr(float(adam.lr)),
                        test_error=repr(float(error)),
                    )
                    if eval_callback is not None:
                        eval_callback(epoch, time.perf_counter() - t_start, error)
                    if self.verbose:
                        print(
                            f"[{self._algorithm_name()}] epoch {epoch}: "
                            f"test error {error:.4f}"
                        )
                    if error < best_error:
                        best_error = error
                        best_snapshot = self.net_.copy_parameters()
                        best_epoch = epoch
                        intervals_without_improvement = 0
                    else:
                        intervals_without_improvement += 1
                        if intervals_without_improvement >= self.patience:
                            break
        finally:
            self._close_metrics()

        if best_snapshot is not None:
            self.net_.restore_parameters(best_snapshot)
        self.best_eval_error_ = None if best_epoch < 0 else best_error
        self.best_epoch_ = None if best_epoch < 0 else best_epoch
        self.n_epochs_ = epochs_run
        self.final_tree_ = None
        self.n_nodes_ = None
        if self.build_final:
            self._finalize(X, y_idx)
        return self

    # -- inference ---------------------------------------------------------

    def transform(self, X):
        """Embed points with the learned transform."""
        check_is_fitted(self, "net_")
        X = check_array(X).astype(self.dtype, copy=False)
        return embed_batches(self.net_, X)

    def predict(self, X):
        """Classify via the final boundary tree built at fit time."""
        check_is_fitted(self, "net_")
        if self.final_tree_ is None:
            raise ValueError(
                "no final structure was built (build_final=False); "
                "call finalize_tree or refit with build_final=True"
            )
        X = check_array(X).astype(self.dtype, copy=False)
        pred_idx = self.final_tree_.predict(embed_batches(self.net_, X))
        return self.classes_[pred_idx]

    def finalize_tree(self, X, y, max_children=None):
        """Embed ``(X, y)`` with the frozen transform and build a fresh tree.

        Returns the tree; ``predict`` will use it from now on.
        """
        check_is_fitted(self, "net_")
        X, y = check_X_y(X, y)
        X = X.astype(self.dtype, copy=False)
        y_idx = np.searchsorted(self.classes_, y)
        if np.any(self.classes_[np.clip(y_idx, 0, len(self.classes_) - 1)] != y):
            raise ValueError("y contains labels unseen during fit")
        emb = embed_batches(self.net_, X)
        cap = self.max_children if max_children is None else max_children
        self.final_tree_ = BoundaryTreeClassifier(max_children=cap).fit(emb, y_idx)
        self.n_nodes_ = self.final_tree_.n_nodes_
        return self.final_tree_
