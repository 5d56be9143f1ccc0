import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ew_mean_direct
from lpci.errors import ConfigError, StateError
from lpci.panel import GroupEncoder
from lpci.residuals import (
    ResidualState,
    append_observation,
    build_training_matrix,
    compute_residuals,
    ew_mean_series,
    seed_dummy_residuals,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_compute_residuals():
    assert compute_residuals([5.0], [3.0]).tolist() == [2.0]
    y = np.arange(6.0).reshape(2, 3)
    assert np.all(compute_residuals(y, y) == 0)
    assert compute_residuals([1.0], [4.0])[0] < 0
    with pytest.raises(ValueError):
        compute_residuals(np.zeros(3), np.zeros(4))


def test_ew_mean_examples():
    assert ew_mean_series([1, 2, 3], 1.0).tolist() == [1.0, 1.5, 2.0]
    assert ew_mean_series([4, 2], 0.5).tolist() == [4.0, 2.0]


@pytest.mark.parametrize("gamma", [-0.1, 1.01])
def test_ew_mean_gamma_range(gamma):
    with pytest.raises(ValueError):
        ew_mean_series([1.0], gamma)


def test_ew_mean_empty():
    with pytest.raises(ValueError):
        ew_mean_series([], 0.5)


@given(st.lists(finite, min_size=1, max_size=40), st.floats(0, 1))
def test_ew_mean_matches_formula(series, gamma):
    got = ew_mean_series(series, gamma)
    want = ew_mean_direct(series, gamma)
    assert len(got) == len(series)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-9)


@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=40))
def test_ew_mean_gamma_one_is_running_mean(series):
    got = ew_mean_series(series, 1.0)
    want = np.cumsum(series) / np.arange(1, len(series) + 1)
    assert np.array_equal(got, want)


def test_training_matrix_single_row():
    s = ResidualState(window=2, gamma=0.9)
    s.extend("g", [1.0, 2.0, 3.0])
    X, y = s.build_training_matrix()
    ew = ew_mean_series([1.0, 2.0, 3.0], 0.9)
    assert X.tolist() == [[ew[1], ew[0], 0.0]]
    assert y.tolist() == [3.0]


def test_training_matrix_large_panel():
    s = ResidualState(window=20, gamma=0.9, encoder=GroupEncoder([f"g{i:03d}" for i in range(300)]))
    rng = np.random.default_rng(0)
    for g in s.encoder.to_dict():
        s.extend(g, rng.standard_normal(30))
    X, y = build_training_matrix(s)
    assert X.shape == (3000, 21) and y.shape == (3000,)


def test_training_matrix_needs_history():
    s = ResidualState(window=3, gamma=0.9)
    s.extend("g", [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        build_training_matrix(s)
    X, _ = s.build_training_matrix(strict=False)
    assert X.shape == (0, 4)


def test_rows_ordered_by_code_then_time():
    enc = GroupEncoder(["b", "a"])
    s = ResidualState(window=1, gamma=0.5, encoder=enc)
    s.extend("b", [10.0, 11.0, 12.0])
    s.extend("a", [1.0, 2.0])
    X, y = s.build_training_matrix()
    assert X[:, -1].tolist() == [0.0, 1.0, 1.0]
    assert y.tolist() == [2.0, 11.0, 12.0]


def test_append_crosses_window_threshold():
    s = ResidualState(window=4, gamma=0.8)
    s.extend("g", [0.1, 0.2, 0.3, 0.4])
    assert s.n_rows() == 0
    append_observation(s, "g", 0.5)
    assert s.n_rows() == 1
    assert s.build_training_matrix()[1].tolist() == [0.5]


@given(st.lists(finite, min_size=1, max_size=30), st.floats(0, 1), st.integers(1, 6))
def test_incremental_matches_batch(series, gamma, window):
    s = ResidualState(window=window, gamma=gamma, include_code=False)
    for k, e in enumerate(series, start=1):
        s.append_observation("g", e)
        assert np.allclose(s.ew_means("g"), ew_mean_direct(series[:k], gamma), rtol=1e-12, atol=1e-9)
    batch = ResidualState(window=window, gamma=gamma, include_code=False)
    batch.extend("g", series)
    Xa, ya = s.build_training_matrix(strict=False)
    Xb, yb = batch.build_training_matrix(strict=False)
    assert np.array_equal(Xa, Xb) and np.array_equal(ya, yb)
    assert Xa.shape == (max(0, len(series) - window), window)
    # targets are raw residuals, never EW means
    assert ya.tolist() == [float(e) for e in series[window:]]


@given(st.dictionaries(st.text("abc", min_size=1, max_size=3), st.integers(0, 12), max_size=5),
       st.integers(1, 5))
def test_matrix_shape_law(lengths, window):
    s = ResidualState(window=window, gamma=0.9)
    for g, n in lengths.items():
        s.register(g)
        s.extend(g, np.linspace(-1, 1, n))
    X, y = s.build_training_matrix(strict=False)
    assert X.shape == (sum(max(0, n - window) for n in lengths.values()), window + 1)


def test_feature_window_most_recent_first():
    s = ResidualState(window=3, gamma=1.0)
    s.extend("g", [3.0, 1.0, 2.0, 6.0])
    ew = s.ew_means("g")
    assert s.feature_window("g").tolist() == [ew[3], ew[2], ew[1], 0.0]
    with pytest.raises(StateError):
        s.feature_window("missing")


def test_feature_window_short_history():
    s = ResidualState(window=3, gamma=1.0)
    s.extend("g", [1.0, 2.0])
    with pytest.raises(StateError):
        s.feature_window("g")


def test_dummy_residuals():
    s = ResidualState(window=20, gamma=0.7)
    seed_dummy_residuals(s, "new", 20)
    assert s.n_dummy("new") == 20
    assert np.all(s.ew_means("new") == 0.0)
    assert np.all(s.feature_window("new")[:-1] == 0.0)
    with pytest.raises(StateError):
        s.seed_dummy_residuals("new", 3)


def test_dummy_era_leaves_window():
    s = ResidualState(window=20, gamma=0.9)
    s.seed_dummy_residuals("g", 20)
    real = np.arange(1.0, 21.0)
    s.extend("g", real)
    window = s.feature_window("g")[:-1]
    # every lag in the window now has at least one real residual behind it
    ew = s.ew_means("g")
    assert window.tolist() == ew[20:][::-1].tolist()
    assert np.all(window != 0.0)


def test_checkpoint_round_trip(tmp_path):
    s = ResidualState(window=2, gamma=0.6, encoder=GroupEncoder(["x", "y"]))
    s.extend("x", [0.5, -1.0, 2.0])
    s.seed_dummy_residuals("y", 2)
    s.append_observation("y", 1.5)
    path = tmp_path / "state.json"
    s.save(path)
    back = ResidualState.load(path)
    Xa, ya = s.build_training_matrix()
    Xb, yb = back.build_training_matrix()
    assert np.array_equal(Xa, Xb) and np.array_equal(ya, yb)
    assert back.n_dummy("y") == 2 and back.gamma == 0.6


def test_bad_window():
    with pytest.raises(ConfigError):
        ResidualState(window=0, gamma=0.5)
