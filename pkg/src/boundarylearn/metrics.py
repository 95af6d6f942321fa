"""Distance kernels, softmax closeness weights, and a brute-force NN oracle.

Everything here works on plain numpy arrays: a point is a 1-D float array,
a point set is a 2-D array with one point per row.  These kernels are the
single distance implementation shared by the boundary structures and the
embedding trainers, so that greedy traversal, exact search and the
differentiable losses all agree bit-for-bit on the same inputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "euclidean_distance",
    "row_distances",
    "pairwise_distances",
    "closeness_weights",
    "brute_force_nn",
]

# Rows of the query block processed per broadcasting step; bounds the
# (chunk, n_refs, dim) temporary while keeping a fixed accumulation order.
_CHUNK_ROWS = 256


def _as_point(x, name="point"):
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    if x.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def _as_points(X, name="points"):
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (one point per row), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


def euclidean_distance(a, b, squared=False):
    """L2 distance between two points of equal dimension.

    Args:
        a, b: 1-D arrays of the same length.
        squared: Return the squared distance instead (skips the sqrt; the
            argmin of any search is unaffected).

    Returns:
        Nonnegative float.  Exactly zero iff ``a == b`` entrywise.
    """
    a = _as_point(a, "a")
    b = _as_point(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    diff = a - b
    sq = np.einsum("i,i->", diff, diff)
    return float(sq) if squared else float(np.sqrt(sq))


def row_distances(query, refs, squared=False):
    """Distances from one query point to every row of ``refs``.

    Same accumulation order as :func:`euclidean_distance`, so the two paths
    produce identical values for identical inputs.
    """
    query = _as_point(query, "query")
    refs = _as_points(refs, "refs")
    if refs.shape[1] != query.shape[0]:
        raise ValueError(
            f"dimension mismatch: query has {query.shape[0]}, refs have {refs.shape[1]}"
        )
    diff = refs - query
    sq = np.einsum("ij,ij->i", diff, diff)
    return sq if squared else np.sqrt(sq)


def pairwise_distances(queries, refs, squared=False):
    """Dense distance matrix between two point sets.

    Entry ``(i, j)`` equals ``euclidean_distance(queries[i], refs[j])``.
    Computed by explicit differencing (not the expanded-norm identity), so
    coincident points give exactly zero and the values match the scalar
    path to floating-point accumulation order.

    Args:
        queries: (n_q, d) array.
        refs: (n_r, d) array, nonempty.
        squared: Return squared distances.

    Returns:
        (n_q, n_r) array in the common dtype of the inputs.
    """
    queries = _as_points(queries, "queries")
    refs = _as_points(refs, "refs")
    if queries.shape[1] != refs.shape[1]:
        raise ValueError(
            f"dimension mismatch: queries have {queries.shape[1]}, refs have {refs.shape[1]}"
        )
    out = np.empty((queries.shape[0], refs.shape[0]), dtype=np.result_type(queries, refs))
    for start in range(0, queries.shape[0], _CHUNK_ROWS):
        block = queries[start : start + _CHUNK_ROWS]
        diff = block[:, None, :] - refs[None, :, :]
        np.einsum("ijk,ijk->ij", diff, diff, out=out[start : start + block.shape[0]])
    return out if squared else np.sqrt(out, out=out)


def closeness_weights(distances, sigma):
    """Softmax of ``-distances / sigma`` along the last axis.

    Computed with max-subtraction so tiny ``sigma`` cannot overflow.  Each
    row is a probability vector summing to one; smaller distances receive
    larger weight, with ``sigma`` controlling how sharply.

    Args:
        distances: 1-D row or 2-D batch of rows of nonnegative distances.
        sigma: Positive temperature dividing the distances.

    Returns:
        Array of the same shape whose last axis sums to 1.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = np.asarray(distances)
    if d.size == 0:
        raise ValueError("distances must be nonempty")
    u = d / (-sigma)
    u = u - u.max(axis=-1, keepdims=True)
    w = np.exp(u)
    w /= w.sum(axis=-1, keepdims=True)
    return w


def brute_force_nn(query, refs):
    """Exact nearest neighbor by exhaustive scan.

    Ties are broken toward the lowest index, which makes every search in
    the library deterministic and lets this function serve as the oracle
    for the approximate structures.

    Returns:
        (index, distance) of the closest row of ``refs``.
    """
    d = row_distances(query, refs)
    idx = int(np.argmin(d))
    return idx, float(d[idx])
