"""Boundary tree and boundary forest classifiers.

A boundary tree stores a small subset of the training points: a point is
inserted only when the greedy tree search misclassifies it, so every edge
joins two differently labeled nodes and the stored points concentrate near
class boundaries.  Queries descend greedily from the root toward the
approximate nearest neighbor.  A boundary forest is an ensemble of trees
built on independent shuffles of the data, combined by majority vote.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import metrics

__all__ = ["TraversalTrace", "BoundaryTreeClassifier", "BoundaryForestClassifier"]

_NO_PARENT = 0xFFFFFFFF
_TREE_MAGIC = b"BLBT"
_FORMAT_VERSION = 1


@dataclass
class TraversalTrace:
    """Record of one greedy descent through a boundary tree.

    Attributes:
        visited: Node indices entered from their parent, in order.  Empty
            when the search never leaves the root.
        final_node: Index of the node where the search stopped.
        candidates: One int array per comparison step, holding the node
            indices compared at that step (the current node, unless it has
            a full child list, followed by its children).
        distances: Float arrays parallel to ``candidates`` with the
            query-to-node distances actually compared.
    """

    visited: list[int]
    final_node: int
    candidates: list[np.ndarray]
    distances: list[np.ndarray]


class BoundaryTreeClassifier(ClassifierMixin, BaseEstimator):
    """Online approximate nearest-neighbor classifier backed by one tree.

    Training presents points sequentially: each point is looked up with the
    same greedy search used at query time, kept as a child of the search
    result when their labels differ, and discarded otherwise.  The first
    point becomes the root and is never replaced.

    Parameters:
        max_children: Cap on the child count of any node, or ``None`` for
            unlimited.  A node with a full child list is excluded from the
            greedy comparison, which forces the search to descend past it.

    Attributes (after fit):
        classes_: Sorted array of class labels seen.
        n_features_in_: Point dimensionality.
        n_nodes_: Number of stored nodes.
    """

    def __init__(self, max_children=None):
        self.max_children = max_children

    # -- construction -------------------------------------------------

    def _init_store(self, n_features, classes, dtype):
        self.classes_ = np.asarray(classes)
        self.n_features_in_ = int(n_features)
        self._points = np.empty((16, n_features), dtype=dtype)
        self._labels = np.empty(16, dtype=np.int64)
        self._parent = np.empty(16, dtype=np.int64)
        self._children: list[list[int]] = []
        self._n_nodes = 0

    def _grow(self):
        cap = self._points.shape[0]
        if self._n_nodes == cap:
            self._points = np.resize(self._points, (2 * cap, self._points.shape[1]))
            self._labels = np.resize(self._labels, 2 * cap)
            self._parent = np.resize(self._parent, 2 * cap)

    def _add_node(self, x, label_idx, parent):
        self._grow()
        i = self._n_nodes
        self._points[i] = x
        self._labels[i] = label_idx
        self._parent[i] = parent
        self._children.append([])
        if parent >= 0:
            self._children[parent].append(i)
        self._n_nodes += 1
        return i

    def fit(self, X, y):
        """Build the tree by inserting the rows of ``X`` in order."""
        if self.max_children is not None and self.max_children < 1:
            raise ValueError("max_children must be None or >= 1")
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self._init_store(X.shape[1], self.classes_, X.dtype)
        for row, yi in zip(X, y_idx):
            self._insert_idx(row, int(yi))
        self.n_nodes_ = self._n_nodes
        return self

    def partial_fit(self, X, y, classes=None):
        """Insert additional points into an existing tree.

        ``classes`` must be given on the first call so later batches can
        introduce labels in any order.
        """
        first = not hasattr(self, "_points")
        if first:
            if classes is None:
                raise ValueError("classes must be provided on the first partial_fit call")
            X, y = check_X_y(X, y)
            self._init_store(X.shape[1], np.sort(np.asarray(classes)), X.dtype)
        else:
            X, y = check_X_y(X, y)
            if X.shape[1] != self.n_features_in_:
                raise ValueError(
                    f"X has {X.shape[1]} features, tree was built with {self.n_features_in_}"
                )
        y_idx = np.searchsorted(self.classes_, y)
        if np.any(y_idx >= len(self.classes_)) or np.any(self.classes_[y_idx] != y):
            raise ValueError("y contains labels outside the declared classes")
        for row, yi in zip(X, y_idx):
            self._insert_idx(row, int(yi))
        self.n_nodes_ = self._n_nodes
        return self

    def insert(self, x, label) -> bool:
        """Offer a single point; returns True when it was kept."""
        check_is_fitted(self, "_points")
        x = np.asarray(x)
        pos = np.searchsorted(self.classes_, label)
        if pos >= len(self.classes_) or self.classes_[pos] != label:
            raise ValueError(f"unknown label {label!r}")
        kept = self._insert_idx(x, int(pos))
        self.n_nodes_ = self._n_nodes
        return kept

    def _insert_idx(self, x, label_idx) -> bool:
        if self._n_nodes == 0:
            self._add_node(x, label_idx, -1)
            return True
        trace = self._traverse(x)
        if self._labels[trace.final_node] == label_idx:
            return False
        self._add_node(x, label_idx, trace.final_node)
        return True

    # -- search --------------------------------------------------------

    def _traverse(self, x) -> TraversalTrace:
        node = 0
        visited: list[int] = []
        cand_hist: list[np.ndarray] = []
        dist_hist: list[np.ndarray] = []
        while True:
            kids = self._children[node]
            saturated = self.max_children is not None and len(kids) >= self.max_children
            cand = kids if saturated else [node, *kids]
            d = metrics.row_distances(x, self._points[cand])
            k = int(np.argmin(d))
            cand_hist.append(np.asarray(cand, dtype=np.int64))
            dist_hist.append(d)
            chosen = cand[k]
            if chosen == node:
                return TraversalTrace(visited, node, cand_hist, dist_hist)
            visited.append(chosen)
            node = chosen

    def traverse(self, x) -> TraversalTrace:
        """Greedy root-to-leaf search for the approximate nearest node.

        At each step the query is compared against the current node and its
        children; the search descends while a child is strictly closest and
        stops when the current node wins.  Ties go to the lowest node index.
        """
        check_is_fitted(self, "_points")
        if self._n_nodes == 0:
            raise ValueError("tree is empty")
        x = metrics._as_point(np.asarray(x, dtype=self._points.dtype), "query")
        if x.shape[0] != self.n_features_in_:
            raise ValueError(f"query has {x.shape[0]} features, expected {self.n_features_in_}")
        return self._traverse(x)

    def _predict_idx(self, X):
        """Vectorized greedy traversal: class index of the final node per row."""
        n = X.shape[0]
        current = np.zeros(n, dtype=np.int64)
        active = np.arange(n)
        while active.size:
            next_active = []
            for node in np.unique(current[active]):
                group = active[current[active] == node]
                kids = self._children[node]
                saturated = self.max_children is not None and len(kids) >= self.max_children
                cand = kids if saturated else [node, *kids]
                if len(cand) == 1 and cand[0] == node:
                    continue
                d = metrics.pairwise_distances(X[group], self._points[cand])
                chosen = np.asarray(cand)[np.argmin(d, axis=1)]
                moved = chosen != node
                current[group[moved]] = chosen[moved]
                next_active.extend(group[moved])
            active = np.asarray(sorted(next_active), dtype=np.int64)
        return self._labels[current]

    def predict(self, X):
        """Label of the approximate nearest node for each row of ``X``."""
        check_is_fitted(self, "_points")
        if self._n_nodes == 0:
            raise ValueError("tree is empty")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.classes_[self._predict_idx(X.astype(self._points.dtype, copy=False))]

    # -- introspection ---------------------------------------------------

    @property
    def points_(self):
        return self._points[: self._n_nodes]

    @property
    def labels_(self):
        """Class indices (positions into ``classes_``) per node."""
        return self._labels[: self._n_nodes]

    @property
    def parent_(self):
        """Parent index per node; -1 for the root."""
        return self._parent[: self._n_nodes]

    def children_of(self, node):
        return list(self._children[node])

    # -- serialization ----------------------------------------------------

    def save(self, path):
        """Write the tree as a flat little-endian record file.

        Layout (all integers little-endian u32, points little-endian f32):
        magic ``BLBT``, version, n_nodes, n_features, n_classes,
        max_children (0xFFFFFFFF = unlimited); then per node in index
        order: index, parent (0xFFFFFFFF for the root), label index, and
        the point coordinates.
        """
        check_is_fitted(self, "_points")
        with open(path, "wb") as f:
            f.write(_TREE_MAGIC)
            f.write(
                struct.pack(
                    "<5I",
                    _FORMAT_VERSION,
                    self._n_nodes,
                    self.n_features_in_,
                    len(self.classes_),
                    _NO_PARENT if self.max_children is None else self.max_children,
                )
            )
            for i in range(self._n_nodes):
                parent = self._parent[i]
                f.write(
                    struct.pack(
                        "<3I", i, _NO_PARENT if parent < 0 else int(parent), int(self._labels[i])
                    )
                )
                f.write(np.ascontiguousarray(self._points[i], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        """Read a tree written by :meth:`save`.

        The file stores class indices, so the loaded classifier predicts
        indices ``0..n_classes-1``; assign ``classes_`` afterwards to map
        back to original labels.
        """
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != _TREE_MAGIC:
            raise ValueError("not a boundary tree file (bad magic)")
        version, n_nodes, n_features, n_classes, max_children = struct.unpack_from("<5I", raw, 4)
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported tree format version {version}")
        tree = cls(max_children=None if max_children == _NO_PARENT else int(max_children))
        tree._init_store(n_features, np.arange(n_classes), np.float32)
        offset = 4 + 20
        record = 12 + 4 * n_features
        if len(raw) != offset + record * n_nodes:
            raise ValueError("truncated boundary tree file")
        for i in range(n_nodes):
            idx, parent, label = struct.unpack_from("<3I", raw, offset)
            if idx != i:
                raise ValueError("node records out of order")
            point = np.frombuffer(raw, dtype="<f4", count=n_features, offset=offset + 12)
            tree._add_node(point, int(label), -1 if parent == _NO_PARENT else int(parent))
            offset += record
        tree.n_nodes_ = tree._n_nodes
        return tree


class BoundaryForestClassifier(ClassifierMixin, BaseEstimator):
    """Majority-vote ensemble of boundary trees over shuffled insertions.

    Parameters:
        n_trees: Ensemble size.
        max_children: Child cap shared by all trees.
        random_state: Seed for the per-tree insertion shuffles.
    """

    def __init__(self, n_trees=5, max_children=None, random_state=None):
        self.n_trees = n_trees
        self.max_children = max_children
        self.random_state = random_state

    def fit(self, X, y):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.random_state)
        self.trees_ = []
        for _ in range(self.n_trees):
            order = rng.permutation(X.shape[0])
            self.trees_.append(
                BoundaryTreeClassifier(max_children=self.max_children).fit(X[order], y[order])
            )
        return self

    def predict(self, X):
        """Per-tree prediction combined by unweighted majority vote.

        Vote ties resolve to the lowest class index, so a two-tree split
        between classes 0 and 1 predicts class 0.
        """
        check_is_fitted(self, "trees_")
        X = check_array(X)
        votes = np.zeros((X.shape[0], len(self.classes_)), dtype=np.int64)
        for tree in self.trees_:
            idx = np.searchsorted(self.classes_, tree.predict(X))
            votes[np.arange(X.shape[0]), idx] += 1
        return self.classes_[np.argmax(votes, axis=1)]
