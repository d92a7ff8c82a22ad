"""Lloyd's k-means with k-means++ seeding, shared by centroid init and the baseline."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

MAX_ITER = 300
N_INIT = 10


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    inertia_trace: list[float]
    duplicate_centroids: bool = False


def sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    closest = sq_distances(X, X[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        closest = np.minimum(closest, sq_distances(X, X[[nxt]])[:, 0])
    return X[idx].copy()


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = MAX_ITER):
    """Run Lloyd iterations to an assignment fixpoint; returns (C, labels, inertia, n_iter, trace)."""
    C = centroids.copy()
    labels = None
    trace = []
    for it in range(1, max_iter + 1):
        d = sq_distances(X, C)
        new = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(C.shape[0]):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(axis=0)
            else:
                # empty cluster: move to the point worst served by its centroid
                far = int(np.argmax(d[np.arange(len(X)), labels]))
                C[j] = X[far]
    d = sq_distances(X, C)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(X)), labels].sum())
    return C, labels, inertia, it, trace


def kmeans(X, k: int, seed: int = 0, n_init: int = N_INIT, max_iter: int = MAX_ITER) -> KMeansResult:
    """Best-of-``n_init`` k-means.

    Rows are sorted lexicographically before seeding so the result does not
    depend on input order; labels are returned in the caller's order.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {X.shape}")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    n_distinct = len(np.unique(Xs, axis=0))
    duplicate = n_distinct < k
    if duplicate:
        warnings.warn(f"only {n_distinct} distinct points for k={k}; centroids will coincide", RuntimeWarning)

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        C0 = _kmeanspp(Xs, k, rng)
        C, labels, inertia, n_iter, trace = lloyd(Xs, C0, max_iter)
        if best is None or inertia < best[2]:
            best = (C, labels, inertia, n_iter, trace)
    C, labels_sorted, inertia, n_iter, trace = best
    labels = np.empty(n, dtype=np.int64)
    labels[order] = labels_sorted
    return KMeansResult(C, labels, inertia, n_iter, trace, duplicate)
