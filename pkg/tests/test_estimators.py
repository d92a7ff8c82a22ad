import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from btgat.data import preprocess
from btgat.estimators import BTGATClusterer, GridPreprocessor, HACClusterer, KMeansClusterer, flatten_frames
from btgat.synth import RegimeSpec, adjusted_rand_index, generate

HAND = np.array([[0.0], [0.1], [10.0], [10.1]])


def test_get_params_and_clone():
    est = BTGATClusterer(n_clusters=4, lam=2.0)
    params = est.get_params()
    assert params["n_clusters"] == 4 and params["lam"] == 2.0 and params["eta"] == 0.01
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert KMeansClusterer(n_clusters=2).set_params(seed=5).seed == 5


def test_preprocessor_matches_functional_pipeline():
    d, _ = generate(RegimeSpec(segment_lengths=[3, 3, 3], grid=(4, 4), n_vars=2, missing_rate=0.1, seed=2))
    pre = GridPreprocessor().fit(d.values)
    assert np.allclose(pre.transform(d.values), preprocess(d).values, rtol=0, atol=1e-15)
    assert pre.n_features_in_ == 2
    with pytest.raises(ValueError):
        pre.transform(d.values[..., :1])


def test_preprocessor_requires_fit():
    with pytest.raises(NotFittedError):
        GridPreprocessor().transform(np.zeros((2, 1, 1, 1)))


def test_kmeans_and_hac_estimators():
    km = KMeansClusterer(n_clusters=2).fit(HAND)
    assert np.allclose(np.sort(km.cluster_centers_.ravel()), [0.05, 10.05])
    assert km.predict([[9.0], [1.0]]).tolist() == [km.labels_[2], km.labels_[0]]
    assert HACClusterer(n_clusters=2).fit_predict(HAND).tolist() == [0, 0, 1, 1]
    with pytest.raises(ValueError):
        KMeansClusterer().fit(np.zeros((3, 2, 2)))


def test_btgat_estimator_end_to_end():
    d, truth = generate(RegimeSpec(n_regimes=2, segment_lengths=[6, 6, 6, 6], grid=(8, 8), n_vars=2, seed=1))
    X = GridPreprocessor().fit_transform(d.values)
    est = BTGATClusterer(
        n_clusters=2, window_length=4, latent_dim=2, channel_capacities=(2, 2, 2, 2), knn_k=1,
        bilstm_hidden=2, warmup_steps=3, max_iters=10, update_interval=5,
    )
    labels = est.fit_predict(X)
    assert labels.shape == (24,)
    assert est.transform(X).shape == (24, 2)
    proba = est.predict_proba(X)
    assert np.all(np.abs(proba.sum(axis=1) - 1) <= 1e-9)
    assert np.array_equal(est.predict(X), labels)
    assert -1.0 <= adjusted_rand_index(labels, truth) <= 1.0
    with pytest.raises(ValueError):
        est.transform(X[:, :4])


def test_btgat_rejects_nan_grid():
    X = np.zeros((8, 8, 8, 1))
    X[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="GridPreprocessor"):
        BTGATClusterer().fit(X)
    assert flatten_frames(np.zeros((3, 2, 2, 1))).shape == (3, 4)
