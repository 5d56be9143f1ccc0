from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import exact_cdf, exact_quantile, exact_weights, route
from lpci.errors import ConfigError
from lpci.forest import (
    BACKEND,
    ForestParams,
    QuantileForest,
    conditional_cdf,
    fit_forest,
    fit_tree,
    get_kernels,
    leaf_weights,
    predict_mean,
    quantile,
    weighted_quantiles,
)


def _data(n=60, d=3, seed=0, rounding=None):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = X[:, 0] + 0.3 * rng.standard_normal(n)
    if rounding is not None:
        X, y = np.round(X, rounding), np.round(y, rounding)
    return X, y


# -- single trees --------------------------------------------------------


def test_constant_targets_give_single_leaf():
    X, _ = _data()
    tree = fit_tree(X, np.full(len(X), 2.5), ForestParams(min_leaf_size=1))
    assert tree.n_nodes == 1 and tree.value[0] == 2.5


def test_tree_interpolates_identity():
    x = np.arange(10, dtype=float)
    tree = fit_tree(x[:, None], x, ForestParams(min_leaf_size=1))
    assert np.mean((tree.predict(x[:, None]) - x) ** 2) == 0.0


def test_separable_root_threshold():
    x = np.array([-3.0, -2.0, -0.5, 0.4, 1.0, 2.0])
    y = (x > 0).astype(float)
    tree = fit_tree(x[:, None], y, ForestParams(min_leaf_size=1))
    assert tree.feature[0] == 0
    assert -0.5 < tree.threshold[0] < 0.4


def test_leaves_respect_min_size_and_cover_samples():
    X, y = _data(n=200, d=4)
    tree = fit_tree(X, y, ForestParams(min_leaf_size=7))
    members = np.concatenate(list(tree.leaf_samples.values()))
    assert sorted(members.tolist()) == list(range(200))
    assert min(len(v) for v in tree.leaf_samples.values()) >= 7
    assert set(tree.leaf_samples) == set(tree.leaves().tolist())


def test_node_stops_below_twice_min_leaf():
    X, y = _data(n=9, d=1)
    tree = fit_tree(X, y, ForestParams(min_leaf_size=5))
    assert tree.n_nodes == 1


def test_fit_tree_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_tree(np.empty((0, 2)), np.empty(0))
    with pytest.raises(ValueError):
        fit_tree(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        fit_tree(np.array([[np.nan]]), np.zeros(1), ForestParams(min_leaf_size=1))


def test_max_depth_limits_tree():
    X, y = _data(n=300)
    tree = fit_tree(X, y, ForestParams(min_leaf_size=1, max_depth=2))
    assert tree.n_nodes <= 7


# -- forests ---------------------------------------------------------------


def test_single_unbagged_tree_matches_forest():
    X, y = _data()
    params = ForestParams(n_trees=1, bootstrap=False, min_leaf_size=3)
    forest = fit_forest(X, y, params)
    tree = fit_tree(X, y, params)
    assert np.array_equal(forest.predict(X), tree.predict(X))


def test_forest_determinism():
    X, y = _data(n=120)
    a = fit_forest(X, y, ForestParams(n_trees=20, seed=4))
    b = fit_forest(X, y, ForestParams(n_trees=20, seed=4))
    for name in ("feature_", "threshold_", "left_", "right_", "value_"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    Xq, _ = _data(n=30, seed=9)
    assert np.array_equal(a.weights(Xq), b.weights(Xq))


def test_different_seeds_differ():
    X, y = _data(n=120)
    a = fit_forest(X, y, ForestParams(n_trees=5, seed=1))
    b = fit_forest(X, y, ForestParams(n_trees=5, seed=2))
    assert not np.array_equal(a.predict(X), b.predict(X))


def test_forest_regression_accuracy():
    rng = np.random.default_rng(7)
    x = rng.uniform(-2, 2, 500)
    y = x + rng.normal(0, 0.1, 500)
    forest = fit_forest(x[:, None], y, ForestParams(n_trees=100, seed=0))
    xt = rng.uniform(-2, 2, 1000)
    yt = xt + rng.normal(0, 0.1, 1000)
    assert np.mean((forest.predict(xt[:, None]) - yt) ** 2) < 0.05


def test_predict_mean_single_leaf():
    X = np.zeros((3, 1))
    forest = fit_forest(X, [1.0, 2.0, 3.0], ForestParams(n_trees=1, bootstrap=False, min_leaf_size=1))
    assert predict_mean(forest, [0.0]) == 2.0


def test_identical_trees_average_to_one_tree():
    X, y = _data()
    one = fit_forest(X, y, ForestParams(n_trees=1, bootstrap=False, max_features=1.0))
    many = fit_forest(X, y, ForestParams(n_trees=6, bootstrap=False, max_features=1.0))
    assert np.allclose(one.predict(X), many.predict(X), rtol=0, atol=1e-12)


def test_dimension_mismatch():
    X, y = _data(d=3)
    forest = fit_forest(X, y, ForestParams(n_trees=3))
    for fn in (lambda: forest.predict(np.zeros((1, 2))), lambda: leaf_weights(forest, [0.0, 1.0]),
               lambda: conditional_cdf(forest, [0.0], 0.0), lambda: quantile(forest, [0.0] * 4, 0.5)):
        with pytest.raises(ValueError):
            fn()


def test_forest_params_validation_and_round_trip():
    p = ForestParams(n_trees=7, min_leaf_size=2, max_features=0.5, max_depth=4, seed=9)
    assert ForestParams.from_dict(p.to_dict()) == p
    with pytest.raises(ConfigError):
        ForestParams.from_dict({"n_tree": 3})
    with pytest.raises(ConfigError):
        ForestParams(n_trees=0)
    assert ForestParams().features_per_split(3) == 3
    assert ForestParams().features_per_split(11) == 4
    assert ForestParams(max_features=20).features_per_split(5) == 5


# -- weights, cdf and quantiles -------------------------------------------


def test_weights_single_tree_leaf():
    X = np.array([[0.0], [0.0], [1.0], [2.0]])
    forest = fit_forest(X, [0.0, 0.0, 5.0, 5.0], ForestParams(n_trees=1, bootstrap=False, min_leaf_size=2))
    assert leaf_weights(forest, [0.0]) == {0: 0.5, 1: 0.5}


def test_weights_average_over_trees():
    X = np.array([[0.0], [1.0]])
    forest = fit_forest(X, [0.0, 1.0], ForestParams(n_trees=2, bootstrap=False, min_leaf_size=1))
    # overwrite the second tree so it is a single leaf holding both samples
    forest.feature_[1, :] = -1
    forest.train_leaves_[1, :] = 0
    forest.leaf_size_[1, :] = 0
    forest.leaf_size_[1, 0] = 2
    forest._index = get_kernels().leaf_index(forest.train_leaves_, forest.leaf_size_)
    assert leaf_weights(forest, [0.0]) == {0: 0.75, 1: 0.25}


def test_uniform_cdf_and_quantile():
    X = np.zeros((3, 1))
    forest = fit_forest(X, [1.0, 2.0, 3.0], ForestParams(n_trees=1, bootstrap=False, min_leaf_size=1))
    assert conditional_cdf(forest, [0.0], 2.0) == pytest.approx(2 / 3, abs=0)
    assert conditional_cdf(forest, [0.0], 0.5) == 0.0
    assert conditional_cdf(forest, [0.0], 3.0) == 1.0
    assert quantile(forest, [0.0], 0.5) == 2.0
    assert quantile(forest, [0.0], 0.01) == 1.0
    assert quantile(forest, [0.0], 0.999) == 3.0


def test_quantile_level_bounds():
    X = np.zeros((3, 1))
    forest = fit_forest(X, [1.0, 2.0, 3.0], ForestParams(n_trees=1, min_leaf_size=1))
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            quantile(forest, [0.0], p)


def test_weighted_quantile_hand_case():
    W = np.array([[0.2, 0.5, 0.3]])
    y = np.array([5.0, 1.0, 9.0])
    assert weighted_quantiles(W, y, [0.6])[0, 0] == 5.0
    assert weighted_quantiles(W, y, [0.5, 0.7, 0.70001, 1.0, 0.0]).tolist() == [[1.0, 5.0, 9.0, 9.0, 1.0]]


def test_weighted_quantile_zero_weight_ends():
    W = np.array([[0.0, 0.5, 0.5, 0.0]])
    y = np.array([-10.0, 1.0, 2.0, 10.0])
    assert weighted_quantiles(W, y, [0.0, 1.0]).tolist() == [[1.0, 2.0]]


def test_oracle_agreement_small_forests():
    rng = np.random.default_rng(123)
    for trial in range(10):
        n = int(rng.integers(5, 40))
        X = np.round(rng.standard_normal((n, 2)), 1)
        y = np.round(rng.standard_normal(n), 1)
        forest = fit_forest(X, y, ForestParams(n_trees=int(rng.integers(1, 8)), min_leaf_size=int(rng.integers(1, 4)), seed=trial))
        x = np.round(rng.standard_normal(2), 1)
        w = exact_weights(forest, X, x)
        got = leaf_weights(forest, x)
        assert set(got) == set(w)
        assert all(abs(got[i] - float(w[i])) <= 1e-15 for i in w)
        for p in (0.05, 0.25, 0.5, 0.9, float(rng.uniform(0.01, 0.99))):
            assert quantile(forest, x, p) == exact_quantile(w, y, p)
        for z in y:
            assert conditional_cdf(forest, x, z) == float(exact_cdf(w, y, z))


def test_route_matches_apply():
    X, y = _data(n=80)
    forest = fit_forest(X, y, ForestParams(n_trees=4))
    leaves = forest.apply(X)
    for k in range(4):
        tree = forest.tree(k)
        assert [route(tree, x) for x in X] == leaves[k].tolist()


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 4))
def test_weights_normalized(seed, min_leaf, d):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(min_leaf, 60))
    X = rng.standard_normal((n, d))
    y = rng.standard_normal(n)
    forest = fit_forest(X, y, ForestParams(n_trees=5, min_leaf_size=min_leaf, seed=seed))
    W = forest.weights(rng.standard_normal((7, d)))
    assert np.all(W >= 0)
    assert np.allclose(W.sum(axis=1), 1.0, rtol=0, atol=1e-9)


@given(st.integers(0, 10_000))
def test_cdf_monotone_and_quantile_duality(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 50))
    X = rng.standard_normal((n, 2))
    y = np.round(rng.standard_normal(n), 1)
    forest = fit_forest(X, y, ForestParams(n_trees=4, min_leaf_size=1, seed=seed))
    x = rng.standard_normal(2)
    zs = np.sort(np.concatenate([y, [y.min() - 1, y.max() + 1]]))
    cdf = [conditional_cdf(forest, x, z) for z in zs]
    assert all(a <= b for a, b in zip(cdf, cdf[1:]))
    assert cdf[0] == 0.0 and cdf[-1] == 1.0
    qs = forest.quantiles(x, np.linspace(0.01, 0.99, 25))[0]
    assert np.all(np.diff(qs) >= 0)
    w = exact_weights(forest, X, x)
    for p in (0.1, 0.37, 0.5, 0.9):
        q = quantile(forest, x, p)
        assert conditional_cdf(forest, x, q) >= p
        below = y[y < q]
        if below.size:
            # strict inequality holds for the exact CDF; the float may round onto p
            assert exact_cdf(w, y, below.max()) < Fraction(p)


# -- backend equivalence ------------------------------------------------------


@pytest.mark.skipif(BACKEND != "numba", reason="numba is not available")
@pytest.mark.parametrize("seed,rounding,min_leaf", [(0, None, 1), (1, 1, 2), (2, 0, 3), (3, 1, 5)])
def test_numba_and_numpy_agree_bit_for_bit(seed, rounding, min_leaf):
    X, y = _data(n=150, d=5, seed=seed, rounding=rounding)
    params = ForestParams(n_trees=8, min_leaf_size=min_leaf, seed=seed)
    a = QuantileForest(params, backend="numba").fit(X, y)
    b = QuantileForest(params, backend="numpy").fit(X, y)
    for name in ("feature_", "threshold_", "left_", "right_", "value_", "train_leaves_", "leaf_size_"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    Xq, _ = _data(n=40, d=5, seed=seed + 100, rounding=rounding)
    assert np.array_equal(a.predict(Xq), b.predict(Xq))
    assert np.array_equal(a.weights(Xq), b.weights(Xq))
    assert np.array_equal(a.quantiles(Xq, [0.05, 0.5, 0.95]), b.quantiles(Xq, [0.05, 0.5, 0.95]))


def test_env_flag_selects_numpy_backend():
    import os
    import subprocess
    import sys

    env = {**os.environ, "LPCI_DISABLE_NUMBA": "1"}
    out = subprocess.run(
        [sys.executable, "-c", "from lpci.forest import BACKEND; print(BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
