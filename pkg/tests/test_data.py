import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from btgat.data import (
    DataError,
    GridDataset,
    denormalize,
    flatten_2d,
    impute_mean,
    ingest_grid,
    minmax_normalize,
    preprocess,
    to_sequence_tensor,
    unflatten,
    write_grid_container,
    write_grid_csv,
)


def _grid(values, names=None):
    values = np.asarray(values, dtype=np.float64)
    return GridDataset(values, names or [f"v{i}" for i in range(values.shape[-1])])


# -- ingestion ---------------------------------------------------------------------


def test_container_layout(tmp_path):
    values = np.arange(16, dtype=np.float64).reshape(4, 2, 2, 1)
    path = tmp_path / "g.stgrid"
    write_grid_container(_grid(values, ["t2m"]), path)
    d = ingest_grid(path)
    assert d.shape == (4, 2, 2, 1)
    assert d.var_names == ["t2m"]
    assert np.array_equal(d.values, values)
    assert d.n_missing == 0


def test_csv_round_trip_matches_container(tmp_path):
    values = np.random.default_rng(0).normal(size=(2, 2, 2, 1))
    write_grid_csv(_grid(values), tmp_path / "g.csv")
    write_grid_container(_grid(values), tmp_path / "g.stgrid")
    a = ingest_grid(tmp_path / "g.csv")
    b = ingest_grid(tmp_path / "g.stgrid")
    assert np.array_equal(a.values, b.values)
    assert a.var_names == b.var_names


def test_csv_empty_cell_is_missing(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("t,lon,lat,var,value\n0,0,0,x,1.5\n1,0,0,x,\n")
    d = ingest_grid(path)
    assert d.shape == (2, 1, 1, 1)
    assert d.missing_mask.ravel().tolist() == [False, True]


def test_one_nan_sentinel_gives_one_missing_entry(tmp_path):
    values = np.ones((4, 2, 2, 1))
    values[2, 1, 0, 0] = np.nan
    path = tmp_path / "g.stgrid"
    write_grid_container(_grid(values), path)
    d = ingest_grid(path)
    assert d.missing_mask.sum() == 1 and d.missing_mask[2, 1, 0, 0]


def test_container_errors(tmp_path):
    path = tmp_path / "g.stgrid"
    write_grid_container(_grid(np.ones((2, 2, 2, 1))), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError, match="expected 64"):
        ingest_grid(path)
    path.write_bytes(b"magic=NOPE T=1 L=1 W=1 n=1\n" + bytes(8))
    with pytest.raises(DataError, match="magic"):
        ingest_grid(path)
    path.write_bytes(b"magic=STGRID1 T=1 L=1 W=1 n=1")
    with pytest.raises(DataError):
        ingest_grid(path)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("a,b\n")
    with pytest.raises(DataError):
        ingest_grid(path)


# -- imputation and normalization ------------------------------------------------------


def test_impute_single_variable():
    d = impute_mean(_grid(np.array([1.0, 2.0, 3.0, np.nan]).reshape(4, 1, 1, 1)))
    assert d.values.ravel().tolist() == [1.0, 2.0, 3.0, 2.0]
    assert d.missing_mask.ravel().tolist() == [False, False, False, True]


def test_impute_uses_global_mean_across_variables():
    values = np.array([[1.0, 10.0], [np.nan, 20.0], [3.0, 30.0]]).reshape(3, 1, 1, 2)
    d = impute_mean(_grid(values))
    # (1 + 3 + 10 + 20 + 30) / 5
    assert d.values[1, 0, 0, 0] == 64.0 / 5


def test_impute_without_missing_is_identity():
    values = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
    d = impute_mean(_grid(values))
    assert d.values.tobytes() == values.tobytes()


def test_impute_all_missing_fails():
    with pytest.raises(DataError):
        impute_mean(_grid(np.full((2, 1, 1, 1), np.nan)))


def test_minmax_examples():
    d = minmax_normalize(_grid(np.array([224.5, 250.0, 289.4]).reshape(3, 1, 1, 1)))
    assert d.values[0, 0, 0, 0] == 0.0 and d.values[2, 0, 0, 0] == 1.0
    assert d.normalization == [(224.5, 289.4)]
    assert minmax_normalize(_grid(np.full((3, 1, 1, 1), 7.0))).values.ravel().tolist() == [0.0] * 3
    d = minmax_normalize(_grid(np.array([0.0, 5.0, 10.0]).reshape(3, 1, 1, 1)))
    assert d.values.ravel().tolist() == [0.0, 0.5, 1.0]


def test_minmax_requires_imputation():
    with pytest.raises(DataError):
        minmax_normalize(_grid(np.array([1.0, np.nan]).reshape(2, 1, 1, 1)))


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 2, 2, 2), elements=finite), arrays(np.bool_, (5, 2, 2, 2)))
def test_preprocess_properties(values, holes):
    holes[0, 0, 0, 0] = False
    raw = values.copy()
    raw[holes] = np.nan
    d = impute_mean(_grid(raw))
    # observed values untouched
    assert np.array_equal(d.values[~holes], values[~holes])
    n = minmax_normalize(d)
    assert np.all((n.values >= 0) & (n.values <= 1))
    assert np.array_equal(n.missing_mask, holes)
    back = denormalize(n.values, n.normalization)
    spans = np.array([hi - lo for lo, hi in n.normalization])
    nonconst = spans > 0
    assert np.allclose(back[..., nonconst], d.values[..., nonconst], rtol=1e-9, atol=1e-6)


# -- flattening ---------------------------------------------------------------------------


def test_flatten_rows_are_variable_pairs():
    values = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 1, 1, 2)
    assert flatten_2d(_grid(values)).tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_flatten_width_arithmetic():
    # shape arithmetic only; no need to allocate the full grid
    T, L, W, n = 365, 41, 41, 7
    assert flatten_2d(np.zeros((T, L, W, n), dtype=np.float32)).shape == (365, 11767)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10**6))
def test_flatten_round_trip(T, L, W, n, seed):
    values = np.random.default_rng(seed).normal(size=(T, L, W, n))
    M = flatten_2d(values)
    assert unflatten(M, L, W, n).tobytes() == values.tobytes()
    assert flatten_2d(unflatten(M, L, W, n)).tobytes() == M.tobytes()


def test_unflatten_rejects_bad_width():
    with pytest.raises(DataError):
        unflatten(np.zeros((2, 5)), 2, 2, 1)


# -- windows ----------------------------------------------------------------------------------


def test_windows_exact_tiling():
    seq = to_sequence_tensor(np.arange(10.0).reshape(10, 1, 1, 1), 5)
    assert seq.B == 2 and seq.frame_mask.all()
    assert seq.window_starts == [0, 5]


def test_windows_ragged_tail_is_padded():
    seq = to_sequence_tensor(np.arange(1.0, 8.0).reshape(7, 1, 1, 1), 5)
    assert seq.B == 2
    assert seq.frame_mask[1].tolist() == [True, True, False, False, False]
    assert np.all(seq.values[1, 2:] == 0)
    assert seq.frame_index(1, 3) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(2, 8))
def test_windows_cover_each_frame_once(T, wl):
    wl = min(wl, T)
    seq = to_sequence_tensor(np.arange(float(T)).reshape(T, 1, 1, 1), wl)
    seen = [seq.frame_index(b, s) for b in range(seq.B) for s in range(wl)]
    seen = [t for t in seen if t is not None]
    assert seen == list(range(T))
    assert seq.B * wl >= T
    assert np.array_equal(seq.frames_to_series(seq.values).ravel(), np.arange(float(T)))


def test_window_errors():
    with pytest.raises(DataError):
        to_sequence_tensor(np.zeros((5, 1, 1, 1)), 1)
    with pytest.raises(DataError):
        to_sequence_tensor(np.zeros((5, 1, 1, 1)), 6)


def test_preprocess_records_ranges():
    d = preprocess(_grid(np.array([2.0, np.nan, 4.0]).reshape(3, 1, 1, 1)))
    assert d.values.ravel().tolist() == [0.0, 0.5, 1.0]
    assert d.normalization == [(2.0, 4.0)]
