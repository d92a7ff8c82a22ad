import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btgat.data import to_sequence_tensor
from btgat.model import ModelConfig, init_model
from btgat.synth import RegimeSpec, generate
from btgat.training import (
    DivergenceError,
    OptimizerState,
    TrainConfig,
    clip_gradients,
    clustering_loss,
    hard_labels,
    init_centroids,
    label_change_fraction,
    reconstruction_loss,
    reseed_empty_clusters,
    sgd_momentum_step,
    target_distribution,
    total_loss,
    train,
    train_step,
)

TINY = ModelConfig(channel_capacities=(2, 2, 2, 2), latent_dim=2, bilstm_hidden=2, knn_k=1, n_clusters=2, window_length=4)


def _rows(rng, T, k):
    q = rng.uniform(0.01, 1.0, size=(T, k))
    return q / q.sum(axis=1, keepdims=True)


# -- reconstruction loss -------------------------------------------------------


def test_reconstruction_loss_examples():
    X = np.random.default_rng(0).uniform(size=(2, 3, 4))
    assert reconstruction_loss(X, X).item() == 0.0
    assert abs(reconstruction_loss(X, X - 0.1).item() - 0.01) <= 1e-12


def test_reconstruction_loss_hand_sum():
    X = np.random.default_rng(1).normal(size=(2, 2))
    Y = np.random.default_rng(2).normal(size=(2, 2))
    hand = sum((X[i, j] - Y[i, j]) ** 2 for i in range(2) for j in range(2)) / 4
    assert abs(reconstruction_loss(X, Y).item() - hand) <= 1e-12


def test_reconstruction_loss_mask():
    X = np.zeros((2, 3, 1))
    Y = np.ones((2, 3, 1))
    Y[1, 2] = 100.0
    mask = np.array([[True, True, True], [True, True, False]])
    assert reconstruction_loss(X, Y, mask).item() == 1.0
    with pytest.raises(ValueError):
        reconstruction_loss(X, Y, np.zeros((2, 3), dtype=bool))


# -- target distribution ----------------------------------------------------------


def test_target_single_row_equals_q():
    assert np.allclose(target_distribution(np.array([[0.8, 0.2]])), [[0.8, 0.2]], rtol=0, atol=1e-15)


def test_target_two_rows_by_hand():
    p = target_distribution(np.array([[0.9, 0.1], [0.6, 0.4]]))
    # f = [1.5, 0.5]; row 0 unnormalized [0.54, 0.02]
    assert np.allclose(p[0], [0.54 / 0.56, 0.02 / 0.56], rtol=0, atol=1e-15)
    assert abs(p[0, 0] - 0.9643) <= 1e-4 and abs(p[0, 1] - 0.0357) <= 1e-4


def test_target_uniform_stays_uniform():
    assert np.allclose(target_distribution(np.full((5, 4), 0.25)), 0.25, rtol=0, atol=1e-15)


def test_target_survives_empty_column():
    p = target_distribution(np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert np.all(np.isfinite(p)) and np.allclose(p.sum(axis=1), 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 20), st.integers(2, 6))
def test_target_rows_sum_to_one(seed, T, k):
    p = target_distribution(_rows(np.random.default_rng(seed), T, k))
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9)


def _entropy(r):
    r = r[r > 0]
    return float(-(r * np.log(r)).sum())


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 6))
def test_target_sharpens_when_frequencies_are_equal(seed, k):
    # all cyclic shifts of one row give equal column sums
    base = _rows(np.random.default_rng(seed), 1, k)[0]
    q = np.stack([np.roll(base, s) for s in range(k)])
    p = target_distribution(q)
    for i in range(k):
        assert _entropy(p[i]) <= _entropy(q[i]) + 1e-12


# -- KL loss --------------------------------------------------------------------------


def test_kl_examples():
    assert abs(clustering_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).item() - math.log(2)) <= 1e-12
    q = _rows(np.random.default_rng(0), 4, 3)
    assert abs(clustering_loss(q, q).item()) <= 1e-12


def test_kl_clamps_zero_q():
    val = clustering_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item()
    assert math.isfinite(val) and val > 20


def test_kl_nonnegative_on_many_pairs():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        p, q = _rows(rng, 1, k), _rows(rng, 1, k)
        assert clustering_loss(p, q).item() >= -1e-15


def test_total_loss_examples():
    assert abs(total_loss(0.5, 0.2, 1.0) - 0.7) <= 1e-15
    assert total_loss(0.5, 0.0, 3.0) == 0.5
    assert abs(total_loss(1.0, 2.0, 0.1) - 1.2) <= 1e-15
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 0.0)


# -- optimizer ---------------------------------------------------------------------------


def test_sgd_without_momentum_is_plain_sgd():
    theta = {"w": np.array([1.0, -2.0])}
    out = sgd_momentum_step(theta, {"w": np.array([0.5, 0.5])}, OptimizerState(), 0.1, 0.0)
    assert np.allclose(out["w"], [0.95, -2.05], rtol=0, atol=1e-15)


def test_sgd_velocity_decays_with_zero_gradient():
    opt = OptimizerState({"w": np.array([1.0])})
    theta = {"w": np.zeros(1)}
    for i in range(1, 5):
        theta = sgd_momentum_step(theta, {"w": np.zeros(1)}, opt, 0.1, 0.5)
        assert opt.velocity["w"][0] == 0.5**i


def test_sgd_two_step_unroll():
    opt = OptimizerState()
    theta = {"w": np.zeros(1)}
    theta = sgd_momentum_step(theta, {"w": np.ones(1)}, opt, 0.1, 0.9)
    assert abs(theta["w"][0] + 0.1) <= 1e-15
    theta = sgd_momentum_step(theta, {"w": np.ones(1)}, opt, 0.1, 0.9)
    assert abs(theta["w"][0] + 0.29) <= 1e-15


def test_sgd_rejects_non_finite_gradient():
    with pytest.raises(DivergenceError, match="'b'"):
        sgd_momentum_step({"b": np.zeros(2)}, {"b": np.array([1.0, np.inf])}, OptimizerState(), 0.1, 0.9)


def test_clip_gradients_scales_to_norm():
    g = clip_gradients({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert np.allclose([g["a"][0], g["b"][0]], [0.6, 0.8], rtol=0, atol=1e-15)


# -- centroids and refresh helpers -----------------------------------------------------------


def test_init_centroids_examples():
    E = np.random.default_rng(0).normal(size=(7, 3))
    assert np.allclose(init_centroids(E, 1), E.mean(axis=0), rtol=0, atol=1e-15)
    C = init_centroids(np.array([[0.0], [0.1], [10.0], [10.1]]), 2)
    assert np.allclose(np.sort(C.ravel()), [0.05, 10.05], rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        init_centroids(E[:1], 2)


def test_init_centroids_ignores_input_order():
    E = np.random.default_rng(1).normal(size=(20, 2))
    perm = np.random.default_rng(2).permutation(20)
    assert np.array_equal(init_centroids(E, 3, seed=5), init_centroids(E[perm], 3, seed=5))


def test_delta_counts_changed_labels():
    assert label_change_fraction(np.array([0, 1, 2, 1]), np.array([0, 1, 1, 1])) == 0.25


def test_hard_labels_breaks_ties_low():
    assert hard_labels(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]


def test_reseed_moves_empty_centroid_to_farthest_point():
    C = np.array([[0.0], [100.0]])
    E = np.array([[0.0], [1.0], [5.0]])
    moved = reseed_empty_clusters(C, E, np.array([0, 0, 0]))
    assert moved == [1] and C[1, 0] == 5.0


def test_train_config_validation():
    for bad in (dict(eta=0), dict(mu=1.0), dict(lam=-1), dict(tol=0), dict(update_interval=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- training steps and loop ---------------------------------------------------------------


def _tiny_problem(seed=0):
    rng = np.random.default_rng(seed)
    seq = to_sequence_tensor(rng.uniform(size=(8, 8, 8, 2)), 4)
    state = init_model(TINY, (8, 8, 2), seed=seed)
    state.params["centroids"] = rng.normal(size=(2, 2))
    return state, seq


def test_vanishing_lambda_step_equals_reconstruction_step():
    a, seq = _tiny_problem()
    b, _ = _tiny_problem()
    tcfg = TrainConfig()
    p = np.full((8, 2), 0.5)
    p[:, 0] = 0.9
    p[:, 1] = 0.1
    train_step(a, OptimizerState(), seq, tcfg)
    train_step(b, OptimizerState(), seq, tcfg, p_rows=p, lam=1e-300)
    for name in a.params:
        assert np.max(np.abs(a.params[name] - b.params[name])) <= 1e-12, name


def _planted(T_segments=(6, 6, 6, 6)):
    spec = RegimeSpec(n_regimes=2, segment_lengths=list(T_segments), grid=(8, 8), n_vars=2, noise_sigma=0.05, seed=1)
    d, truth = generate(spec)
    return d, truth


def test_training_loop_records_deltas_and_halts():
    d, _ = _planted()
    tcfg = TrainConfig(warmup_steps=3, update_interval=2, max_iters=40, tol=1.0, patience=2, seed=3)
    state, cs, log = train(d, TINY, tcfg)
    # tol = 1 means every refresh counts as stable, so the run stops after `patience` refreshes
    assert log.stop_reason == "converged"
    assert len(cs.delta_history) == tcfg.patience
    brute = [
        sum(int(a != b) for a, b in zip(prev, cur)) / len(cur)
        for prev, cur in zip(cs.label_history, cs.label_history[1:])
    ]
    assert cs.delta_history == brute
    assert [r.delta for r in log.refreshes] == cs.delta_history
    assert state.step == tcfg.warmup_steps + tcfg.update_interval * tcfg.patience
    assert np.all(np.abs(cs.q.sum(axis=1) - 1) <= 1e-9)
    assert np.array_equal(cs.labels, hard_labels(cs.q))


def test_training_is_reproducible(tmp_path):
    d, _ = _planted()
    tcfg = TrainConfig(warmup_steps=2, update_interval=2, max_iters=6, seed=4)
    a = train(d, TINY, tcfg, out_dir=tmp_path / "a")
    b = train(d, TINY, tcfg, out_dir=tmp_path / "b")
    assert a[2].lines() == b[2].lines()
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()
    assert a[2].lines()[0].startswith("step=1 phase=pretrain L_rec=")


def test_training_rejects_short_series():
    with pytest.raises(ValueError):
        train(np.zeros((1, 8, 8, 1)), ModelConfig(n_clusters=3, window_length=2), TrainConfig())
