"""Scikit-learn style wrappers around the functional core."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cluster_eval import hac_cluster
from .data import GridDataset, flatten_2d, preprocess, to_sequence_tensor
from .kmeans import kmeans
from .model import ModelConfig, embed, soft_assign
from .training import TrainConfig, hard_labels, train


def _check_grid(X) -> np.ndarray:
    if isinstance(X, GridDataset):
        X = X.values
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected a (T, L, W, n) grid, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("grid contains non-finite values; run GridPreprocessor first")
    return X


class GridPreprocessor(TransformerMixin, BaseEstimator):
    """Mean imputation followed by per-variable min-max scaling to [0, 1].

    Accepts a (T, L, W, n) array with NaN for missing cells.  ``fit`` learns
    the fill value and variable ranges; ``transform`` applies them.
    """

    def fit(self, X, y=None):
        X = np.asarray(X.values if isinstance(X, GridDataset) else X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"expected a (T, L, W, n) grid, got shape {X.shape}")
        d = preprocess(GridDataset(X, [f"v{i}" for i in range(X.shape[-1])]))
        self.fill_value_ = float(np.nanmean(X))
        self.normalization_ = d.normalization
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "normalization_")
        X = np.array(X.values if isinstance(X, GridDataset) else X, dtype=np.float64)
        if X.ndim != 4 or X.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected (T, L, W, {self.n_features_in_}), got {X.shape}")
        X[np.isnan(X)] = self.fill_value_
        for v, (lo, hi) in enumerate(self.normalization_):
            X[..., v] = (X[..., v] - lo) / (hi - lo) if hi > lo else 0.0
        return np.clip(X, 0.0, 1.0)


class KMeansClusterer(ClusterMixin, BaseEstimator):
    """k-means++ / Lloyd on rows of a 2-D matrix (best of ``n_init`` restarts)."""

    def __init__(self, n_clusters=3, n_init=10, max_iter=300, seed=0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        res = kmeans(X, self.n_clusters, seed=self.seed, n_init=self.n_init, max_iter=self.max_iter)
        self.cluster_centers_ = res.centroids
        self.labels_ = res.labels
        self.inertia_ = res.inertia
        self.n_iter_ = res.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        d2 = ((X[:, None, :] - self.cluster_centers_[None]) ** 2).sum(axis=-1)
        return np.argmin(d2, axis=1)


class HACClusterer(ClusterMixin, BaseEstimator):
    """Agglomerative clustering (ward or average linkage) cut at ``n_clusters``."""

    def __init__(self, n_clusters=3, linkage="ward"):
        self.n_clusters = n_clusters
        self.linkage = linkage

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.labels_ = hac_cluster(X, self.n_clusters, self.linkage).labels
        return self


class BTGATClusterer(ClusterMixin, TransformerMixin, BaseEstimator):
    """Deep temporal clustering of a preprocessed (T, L, W, n) grid.

    ``fit`` trains the autoencoder and the clustering head; ``transform``
    returns per-frame latent embeddings (T, latent_dim); ``predict`` returns
    the hard cluster label of every frame.
    """

    def __init__(
        self,
        n_clusters=3,
        window_length=8,
        latent_dim=32,
        channel_capacities=(8, 16, 32, 64),
        knn_k=3,
        bilstm_hidden=32,
        alpha=1.0,
        eta=0.01,
        mu=0.9,
        lam=5.0,
        warmup_steps=30,
        update_interval=10,
        tol=0.01,
        patience=3,
        max_iters=300,
        batch_size=4,
        seed=0,
    ):
        self.n_clusters = n_clusters
        self.window_length = window_length
        self.latent_dim = latent_dim
        self.channel_capacities = channel_capacities
        self.knn_k = knn_k
        self.bilstm_hidden = bilstm_hidden
        self.alpha = alpha
        self.eta = eta
        self.mu = mu
        self.lam = lam
        self.warmup_steps = warmup_steps
        self.update_interval = update_interval
        self.tol = tol
        self.patience = patience
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.seed = seed

    def _configs(self):
        mc = ModelConfig(
            channel_capacities=tuple(self.channel_capacities),
            latent_dim=self.latent_dim,
            knn_k=self.knn_k,
            bilstm_hidden=self.bilstm_hidden,
            n_clusters=self.n_clusters,
            alpha=self.alpha,
            window_length=self.window_length,
        )
        tc = TrainConfig(
            eta=self.eta,
            mu=self.mu,
            lam=self.lam,
            update_interval=self.update_interval,
            tol=self.tol,
            patience=self.patience,
            max_iters=self.max_iters,
            warmup_steps=self.warmup_steps,
            batch_size=self.batch_size,
            seed=self.seed,
        )
        return mc, tc

    def fit(self, X, y=None):
        X = _check_grid(X)
        mc, tc = self._configs()
        self.state_, self.cluster_state_, self.log_ = train(X, mc, tc)
        self.labels_ = self.cluster_state_.labels
        self.cluster_centers_ = self.cluster_state_.centroids
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = _check_grid(X)
        if X.shape[1:] != tuple(self.state_.input_shape):
            raise ValueError(f"grid shape {X.shape[1:]} differs from the fitted {self.state_.input_shape}")
        return embed(self.state_, to_sequence_tensor(X, self.window_length))

    def predict_proba(self, X):
        E = self.transform(X)
        return soft_assign(E, self.state_.centroids, self.alpha).data.copy()

    def predict(self, X):
        return hard_labels(self.predict_proba(X))


def flatten_frames(X) -> np.ndarray:
    """(T, L, W, n) grid to the (T, L*W*n) matrix used by the baselines."""
    return flatten_2d(_check_grid(X))
