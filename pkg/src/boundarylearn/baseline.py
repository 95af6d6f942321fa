"""Plain MLP softmax classifier sharing the trainers' network machinery.

Serves as the parametric reference point: same ReLU network, Adam step and
learning-rate schedule as the embedding trainers, but with a C-way linear
head trained by softmax cross-entropy and evaluated by argmax.
"""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_is_fitted

from ._base import EmbeddingTrainerBase
from .network import embed_batches

__all__ = ["NeuralNetClassifier"]


class NeuralNetClassifier(EmbeddingTrainerBase):
    """Feedforward softmax classifier trained with mini-batch Adam.

    Parameters:
        hidden_dims: Hidden layer widths; the output layer is sized to the
            number of classes seen in fit.
        batch_size: Mini-batch size per Adam step.
        Remaining parameters behave as in the embedding trainers.
    """

    def __init__(
        self,
        hidden_dims=(400, 400, 20),
        batch_size=100,
        learning_rate=1e-3,
        lr_decay_epochs=(400, 1000, 3000),
        epochs=100,
        eval_every=10,
        patience=20,
        metrics_path=None,
        random_state=None,
        dtype=np.float32,
        verbose=0,
    ):
        self.hidden_dims = hidden_dims
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_epochs = lr_decay_epochs
        self.epochs = epochs
        self.eval_every = eval_every
        self.patience = patience
        self.metrics_path = metrics_path
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose
        # the base's eval path is overridden, but fit still reads these
        self.eval_sample_size = 1
        self.build_final = False

    def _algorithm_name(self):
        return "nnet_baseline"

    def _net_dims(self, n_features, n_classes):
        return [n_features, *self.hidden_dims, n_classes]

    def _chunk_size(self):
        return self.batch_size

    def _validate_config(self, n_samples):
        super()._validate_config(n_samples)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.batch_size > n_samples:
            raise ValueError("batch_size exceeds dataset size")

    def _train_step(self, X_chunk, y_idx_chunk, adam):
        logits, tape = self.net_.forward(X_chunk)
        z = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        batch = np.arange(X_chunk.shape[0])
        loss = float(np.mean(log_norm - z[batch, y_idx_chunk]))
        probs = np.exp(z - log_norm[:, None])
        probs[batch, y_idx_chunk] -= 1.0
        grads, _ = self.net_.backward(tape, probs / X_chunk.shape[0])
        adam.step(self.net_, grads)
        return loss, None

    def _validation_error(self, X_struct, y_idx_struct, X_eval, y_eval):
        pred = self.classes_[np.argmax(embed_batches(self.net_, X_eval), axis=1)]
        return float(np.mean(pred != y_eval))

    def _finalize(self, X, y_idx):
        pass

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X).astype(self.dtype, copy=False)
        return self.classes_[np.argmax(embed_batches(self.net_, X), axis=1)]

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X).astype(self.dtype, copy=False)
        logits = embed_batches(self.net_, X)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
