"""Boundary set: the flat, tree-free analogue of a boundary tree.

Points are offered sequentially; each is kept only when its exact nearest
member so far carries a different label.  Queries use exact search over the
members, and soft predictions weight the members' one-hot labels by a
softmax over negative scaled distances.
"""

from __future__ import annotations

import struct

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import metrics

__all__ = ["boundary_set_indices", "BoundarySet"]

_SET_MAGIC = b"BLBS"
_FORMAT_VERSION = 1


def boundary_set_indices(points, labels):
    """Indices kept by the sequential keep/discard rule, in insertion order.

    The first point is always kept.  Every later point is kept iff the
    exact nearest already-kept point (lowest index on ties) has a different
    label.  This is the structure-building core shared by the estimator
    below and the embedding trainers, which run it on transformed points.

    Args:
        points: (n, d) array, offered in row order.
        labels: (n,) integer labels.

    Returns:
        int64 array of kept row indices.
    """
    points = np.asarray(points)
    labels = np.asarray(labels)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a nonempty 2-D array")
    if labels.shape[0] != points.shape[0]:
        raise ValueError("labels length must match points")
    kept = [0]
    for i in range(1, points.shape[0]):
        j, _ = metrics.brute_force_nn(points[i], points[kept])
        if labels[kept[j]] != labels[i]:
            kept.append(i)
    return np.asarray(kept, dtype=np.int64)


class BoundarySet(ClassifierMixin, BaseEstimator):
    """Exact nearest-neighbor classifier over an accumulated boundary set.

    Parameters:
        sigma: Temperature for ``predict_proba``; distances are divided by
            ``sigma`` before the softmax, so small values sharpen the
            prediction toward the single nearest member.

    Attributes (after fit):
        members_: (m, d) array of kept points in insertion order.
        member_labels_: Class indices (into ``classes_``) per member.
    """

    def __init__(self, sigma=1.0):
        self.sigma = sigma

    def fit(self, X, y):
        """Accumulate members from the rows of ``X`` in order."""
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        kept = boundary_set_indices(X, y_idx)
        self.members_ = X[kept].copy()
        self.member_labels_ = y_idx[kept]
        return self

    def nearest(self, x):
        """Exact nearest member: (member index, distance)."""
        check_is_fitted(self, "members_")
        x = np.asarray(x, dtype=self.members_.dtype)
        return metrics.brute_force_nn(x, self.members_)

    def predict_proba(self, X):
        """Closeness-weighted one-hot vote over all members.

        Each row is ``h @ Y`` where ``h`` is the softmax of the negative
        scaled distances from the query to every member and ``Y`` is the
        members' one-hot label matrix; rows sum to one.
        """
        check_is_fitted(self, "members_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        d = metrics.pairwise_distances(X.astype(self.members_.dtype, copy=False), self.members_)
        h = metrics.closeness_weights(d, self.sigma)
        onehot = np.zeros((self.members_.shape[0], len(self.classes_)), dtype=h.dtype)
        onehot[np.arange(self.members_.shape[0]), self.member_labels_] = 1.0
        return h @ onehot

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    # -- serialization ----------------------------------------------------

    def save(self, path):
        """Write members as a flat record file: magic ``BLBS``, version,
        n_members, n_features, n_classes; then per member: index, label
        index (little-endian u32) and little-endian f32 coordinates."""
        check_is_fitted(self, "members_")
        with open(path, "wb") as f:
            f.write(_SET_MAGIC)
            f.write(
                struct.pack(
                    "<4I",
                    _FORMAT_VERSION,
                    self.members_.shape[0],
                    self.n_features_in_,
                    len(self.classes_),
                )
            )
            for i in range(self.members_.shape[0]):
                f.write(struct.pack("<2I", i, int(self.member_labels_[i])))
                f.write(np.ascontiguousarray(self.members_[i], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, sigma=1.0):
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != _SET_MAGIC:
            raise ValueError("not a boundary set file (bad magic)")
        version, n_members, n_features, n_classes = struct.unpack_from("<4I", raw, 4)
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported set format version {version}")
        offset = 4 + 16
        record = 8 + 4 * n_features
        if len(raw) != offset + record * n_members:
            raise ValueError("truncated boundary set file")
        obj = cls(sigma=sigma)
        obj.classes_ = np.arange(n_classes)
        obj.n_features_in_ = int(n_features)
        members = np.empty((n_members, n_features), dtype=np.float32)
        labels = np.empty(n_members, dtype=np.int64)
        for i in range(n_members):
            idx, label = struct.unpack_from("<2I", raw, offset)
            if idx != i:
                raise ValueError("member records out of order")
            members[i] = np.frombuffer(raw, dtype="<f4", count=n_features, offset=offset + 8)
            labels[i] = label
            offset += record
        obj.members_ = members
        obj.member_labels_ = labels
        return obj
