"""Internal validation metrics, elbow selection of k, and k-means / HAC baselines."""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .kmeans import kmeans

METRIC_NAMES = ("silhouette", "davies_bouldin", "calinski_harabasz", "rmse", "variance", "inter_cluster_distance")


@dataclass
class Labeling:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValueError("labels must be 1-D")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def canonical_labels(labels) -> np.ndarray:
    """Relabel so clusters are numbered by first appearance."""
    labels = np.asarray(labels)
    _, first = np.unique(labels, return_index=True)
    order = labels[np.sort(first)]
    remap = {int(old): new for new, old in enumerate(order)}
    return np.array([remap[int(v)] for v in labels], dtype=np.int64)


@dataclass
class MetricReport:
    silhouette: float
    davies_bouldin: float
    calinski_harabasz: float
    rmse: float
    variance: float
    inter_cluster_distance: float
    k: int
    n_samples: int
    method_name: str = ""
    runtime_s: float = 0.0
    flags: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_text(self) -> str:
        lines = [f"method={self.method_name}", f"k={self.k}", f"n_samples={self.n_samples}"]
        lines += [f"{name}={value!r}" for name, value in self.metrics().items()]
        lines.append(f"flags={','.join(self.flags)}")
        for key, value in sorted(self.provenance.items()):
            lines.append(f"provenance.{key}={value}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("runtime_s")
        return json.dumps(_jsonable(d), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _silhouette(D: np.ndarray, labels: np.ndarray, present: np.ndarray) -> float:
    n = len(labels)
    sizes = np.bincount(labels, minlength=present.max() + 1)
    # per-sample summed distance to each cluster
    S = np.stack([D[:, labels == j].sum(axis=1) for j in present], axis=1)
    col = {j: i for i, j in enumerate(present)}
    own = np.array([col[v] for v in labels])
    own_size = sizes[labels]
    a = np.where(own_size > 1, S[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    means = S / sizes[present][None, :]
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def evaluate_internal(data, labels, method_name: str = "", k: int | None = None) -> MetricReport:
    """All six internal scores for one clustering of ``data`` (T, D)."""
    t0 = time.perf_counter()
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if isinstance(labels, Labeling):
        k = labels.k
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(X):
        raise ValueError(f"{len(labels)} labels for {len(X)} samples")
    k = int(labels.max()) + 1 if k is None else k
    present = np.flatnonzero(np.bincount(labels, minlength=k))
    flags = []
    if len(present) < k:
        flags.append(f"empty_clusters={k - len(present)}")
    kk = len(present)
    if kk < 2:
        raise ValueError("need at least two non-empty clusters")
    T = len(X)

    centroids = np.stack([X[labels == j].mean(axis=0) for j in present])
    assigned = centroids[np.searchsorted(present, labels)]
    resid = np.linalg.norm(X - assigned, axis=1)

    D = cdist(X, X)
    if not np.any(D > 0):
        flags.append("identical_points")
        sil = 0.0
    else:
        sil = _silhouette(D, labels, present)

    sigma = np.array([resid[labels == j].mean() for j in present])
    CD = cdist(centroids, centroids)
    off = ~np.eye(kk, dtype=bool)
    if np.any(CD[off] == 0):
        flags.append("davies_bouldin_undefined")
        db = math.nan
    else:
        ratios = (sigma[:, None] + sigma[None, :]) / np.where(off, CD, 1.0)
        ratios[~off] = -np.inf
        db = float(ratios.max(axis=1).mean())

    within = float((resid**2).sum())
    grand = X.mean(axis=0)
    sizes = np.array([(labels == j).sum() for j in present])
    between = float((sizes * ((centroids - grand) ** 2).sum(axis=1)).sum())
    if T == kk or within == 0:
        flags.append("calinski_harabasz_undefined")
        ch = math.inf if between > 0 else math.nan
    else:
        ch = (between / (kk - 1)) / (within / (T - kk))

    rmse = math.sqrt(within / T)
    variance = float(np.mean([X[labels == j].var(axis=0).mean() for j in present]))
    icd = float(pdist(centroids).mean())

    return MetricReport(
        sil, db, ch, rmse, variance, icd, kk, T, method_name, time.perf_counter() - t0, flags,
    )


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def kmeans_cluster(data, k: int, seed: int = 0) -> Labeling:
    return Labeling(kmeans(np.asarray(data, dtype=np.float64), k, seed=seed).labels, k)


def hac_cluster(data, k: int, linkage: str = "ward") -> Labeling:
    """Agglomerative clustering cut at ``k`` clusters.

    Merges the closest pair by the chosen linkage; among equal distances the
    pair with the lowest cluster indices merges first, and a merged cluster
    keeps the lower index.  Ward works on squared Euclidean distances via the
    Lance-Williams update, average linkage on Euclidean distances.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if linkage == "ward":
        D = cdist(X, X, "sqeuclidean")
    elif linkage == "average":
        D = cdist(X, X)
    else:
        raise ValueError(f"unknown linkage {linkage!r}")
    D[np.tril_indices(n)] = np.inf
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    members = {i: [i] for i in range(n)}
    for _ in range(n - k):
        flat = int(np.argmin(D))
        i, j = divmod(flat, n)  # i < j by construction
        full_i = np.minimum(D[i, :], D[:, i])
        full_j = np.minimum(D[j, :], D[:, j])
        ni, nj = size[i], size[j]
        if linkage == "ward":
            nk = size
            dij = D[i, j]
            new = ((ni + nk) * full_i + (nj + nk) * full_j - nk * dij) / (ni + nj + nk)
        else:
            new = (ni * full_i + nj * full_j) / (ni + nj)
        new[~active] = np.inf
        new[[i, j]] = np.inf
        # keep the upper-triangular layout: row i for columns > i, column i for rows < i
        lower = np.arange(n) < i
        D[i, :] = np.where(~lower, new, np.inf)
        D[:, i] = np.where(lower, new, np.inf)
        D[i, i] = np.inf
        D[j, :] = np.inf
        D[:, j] = np.inf
        active[j] = False
        size[i] = ni + nj
        members[i].extend(members.pop(j))
    labels = np.empty(n, dtype=np.int64)
    for new_id, root in enumerate(sorted(members)):
        labels[members[root]] = new_id
    return Labeling(labels, k)


# ---------------------------------------------------------------------------
# elbow
# ---------------------------------------------------------------------------


@dataclass
class ElbowResult:
    k_star: int
    ks: list[int]
    distortions: list[float]
    flags: list[str] = field(default_factory=list)

    def curve_text(self) -> str:
        return "".join(f"{k} {d!r}\n" for k, d in zip(self.ks, self.distortions))


def knee_index(x, y) -> int | None:
    """Index of the point farthest below the chord of a decreasing curve, on
    axes normalized to [0, 1]; None when the curve has no bend."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 3 or np.ptp(y) == 0:
        return None
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y.min()) / np.ptp(y)
    chord = yn[0] + (yn[-1] - yn[0]) * xn
    # perpendicular distance below the chord (convex side of a falling curve)
    dx, dy = 1.0, yn[-1] - yn[0]
    dist = (chord - yn) / math.hypot(dx, dy)
    i = int(np.argmax(dist))
    if dist[i] <= 1e-9:
        return None
    return i


def elbow_k(data, k_range=(2, 10), seed: int = 0) -> ElbowResult:
    """Distortion (k-means inertia) over ``k_range`` and its knee."""
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    k_min, k_max = int(k_range[0]), int(k_range[-1])
    if k_max >= len(X):
        raise ValueError(f"k_max={k_max} must be below the sample count {len(X)}")
    if k_min < 1 or k_min > k_max:
        raise ValueError("invalid k_range")
    ks = list(range(k_min, k_max + 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        dist = [kmeans(X, k, seed=seed).inertia for k in ks]
    flags = []
    if any(b > a * (1 + 1e-12) + 1e-300 for a, b in zip(dist, dist[1:])):
        warnings.warn("distortion curve is not monotone", RuntimeWarning)
        flags.append("non_monotone")
    i = knee_index(ks, dist)
    if i is None:
        flags.append("no_knee")
        return ElbowResult(k_min, ks, dist, flags)
    return ElbowResult(ks[i], ks, dist, flags)
