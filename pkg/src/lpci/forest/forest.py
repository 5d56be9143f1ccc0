"""CART regression trees, bagged forests and the quantile random forest."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

import numpy as np

from lpci._rng import make_rng
from lpci.errors import ConfigError
from lpci.forest._backend import get_kernels

# cumulative weights closer than this to a requested level are re-checked
# with exactly rounded sums
_BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    min_leaf_size: int = 5
    max_features: int | float | None = None
    bootstrap: bool = True
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.min_leaf_size < 1:
            raise ConfigError("min_leaf_size must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")
        if isinstance(self.max_features, float) and not 0.0 < self.max_features <= 1.0:
            raise ConfigError("fractional max_features must lie in (0, 1]")
        if isinstance(self.max_features, int) and self.max_features < 1:
            raise ConfigError("max_features must be >= 1")

    def features_per_split(self, d: int) -> int:
        """All features for ``d <= 3``, otherwise ``ceil(d / 3)`` unless overridden."""
        mf = self.max_features
        if mf is None:
            return d if d <= 3 else math.ceil(d / 3)
        if isinstance(mf, float):
            return max(1, min(d, math.ceil(mf * d)))
        return min(d, int(mf))

    def replace(self, **changes: Any) -> ForestParams:
        return ForestParams(**{**asdict(self), **changes})

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ForestParams:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown forest parameter(s): {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class Tree:
    """A fitted tree stored as flat node arrays.

    Node ``i`` is a leaf when ``feature[i] == -1``; otherwise rows with
    ``x[feature[i]] <= threshold[i]`` go to ``left[i]`` and the rest to
    ``right[i]``. ``leaf_samples`` maps each leaf id to the training-sample
    indices whose feature vector falls in its rectangle.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    leaf_samples: dict[int, np.ndarray]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def apply(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        k = get_kernels()
        return k.apply_forest(
            self.feature[None], self.threshold[None], self.left[None], self.right[None], X
        )[0]

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or y.ndim != 1:
        raise ValueError("expected a 2-d sample matrix and 1-d target vector")
    if len(X) == 0:
        raise ValueError("cannot fit on an empty sample")
    if len(X) != len(y):
        raise ValueError(f"{len(X)} samples but {len(y)} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("samples and targets must be finite")
    return np.ascontiguousarray(X), np.ascontiguousarray(y)


def _feature_keys(rng: np.random.Generator, cap: int, d: int, n_sub: int) -> np.ndarray:
    if n_sub >= d:
        return np.zeros((1, 1))
    return rng.random((cap, d))


def fit_tree(
    samples,
    targets,
    params: ForestParams = ForestParams(),
    rng: np.random.Generator | None = None,
    backend: str | None = None,
) -> Tree:
    """Fit a single CART tree on all of ``samples`` (no resampling)."""
    X, y = _check_xy(samples, targets)
    n, d = X.shape
    if n < params.min_leaf_size:
        raise ValueError(f"need at least min_leaf_size={params.min_leaf_size} samples")
    n_sub = params.features_per_split(d)
    rng = rng if rng is not None else make_rng(params.seed, "tree")
    cap = 2 * (n // params.min_leaf_size) + 1
    keys = _feature_keys(rng, cap, d, n_sub)
    kern = get_kernels(backend)
    max_depth = -1 if params.max_depth is None else params.max_depth
    feature, threshold, left, right, value = kern.build_tree(
        X, y, params.min_leaf_size, max_depth, n_sub, keys
    )
    leaves = kern.apply_forest(feature[None], threshold[None], left[None], right[None], X)[0]
    return Tree(
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        value=value,
        leaf_samples=_group_by_leaf(leaves),
    )


def _group_by_leaf(leaves: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(leaves, kind="stable")
    ids, starts = np.unique(leaves[order], return_index=True)
    return {int(i): g for i, g in zip(ids, np.split(order, starts[1:]))}


class QuantileForest:
    """Bagged CART forest with Meinshausen-style conditional distributions.

    Each tree is grown on a bootstrap resample; afterwards every original
    training sample is dropped down every tree, and a query ``x`` gives
    sample ``i`` the weight ``mean_k 1[i in leaf_k(x)] / |leaf_k(x)|``.
    """

    def __init__(self, params: ForestParams = ForestParams(), backend: str | None = None):
        self.params = params
        self.backend = backend

    def fit(self, samples, targets) -> QuantileForest:
        X, y = _check_xy(samples, targets)
        p = self.params
        n, d = X.shape
        if n < p.min_leaf_size:
            raise ValueError(f"need at least min_leaf_size={p.min_leaf_size} samples")
        n_sub = p.features_per_split(d)
        cap = 2 * (n // p.min_leaf_size) + 1
        boot = np.empty((p.n_trees, n), dtype=np.int64)
        keys = []
        for k in range(p.n_trees):
            rng = make_rng(p.seed, "tree", k)
            boot[k] = rng.integers(0, n, size=n) if p.bootstrap else np.arange(n)
            keys.append(_feature_keys(rng, cap, d, n_sub))
        keys = np.stack(keys)
        kern = get_kernels(self.backend)
        max_depth = -1 if p.max_depth is None else p.max_depth
        (self.feature_, self.threshold_, self.left_, self.right_, self.value_,
         self.n_nodes_) = kern.build_forest(X, y, boot, p.min_leaf_size, max_depth, n_sub, keys)
        self.n_features_ = d
        self.train_targets_ = y
        self.train_leaves_ = kern.apply_forest(
            self.feature_, self.threshold_, self.left_, self.right_, X
        )
        width = self.feature_.shape[1]
        self.leaf_size_ = np.stack(
            [np.bincount(row, minlength=width) for row in self.train_leaves_]
        ).astype(np.int64)
        self._index = kern.leaf_index(self.train_leaves_, self.leaf_size_)
        self._order = np.argsort(y, kind="stable")
        self._sorted_targets = y[self._order]
        return self

    # -- structure -------------------------------------------------------

    @property
    def n_trees(self) -> int:
        return self.feature_.shape[0]

    def tree(self, k: int) -> Tree:
        m = int(self.n_nodes_[k])
        leaves = self.train_leaves_[k]
        return Tree(
            feature=self.feature_[k, :m].copy(),
            threshold=self.threshold_[k, :m].copy(),
            left=self.left_[k, :m].copy(),
            right=self.right_[k, :m].copy(),
            value=self.value_[k, :m].copy(),
            leaf_samples=_group_by_leaf(leaves),
        )

    def _as_queries(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features_:
            raise ValueError(
                f"query has {X.shape[-1]} features, forest was fit on {self.n_features_}"
            )
        return np.ascontiguousarray(X)

    def apply(self, X) -> np.ndarray:
        kern = get_kernels(self.backend)
        return kern.apply_forest(
            self.feature_, self.threshold_, self.left_, self.right_, self._as_queries(X)
        )

    # -- predictions -----------------------------------------------------

    def predict(self, X) -> np.ndarray:
        """Mean over trees of the in-bag leaf mean."""
        kern = get_kernels(self.backend)
        return kern.predict_mean(self.value_, self.apply(X))

    def weights(self, X) -> np.ndarray:
        """Dense ``(n_queries, n_train)`` weight matrix; each row sums to 1."""
        kern = get_kernels(self.backend)
        return kern.leaf_weights(self.train_leaves_, self.leaf_size_, self.apply(X), self._index)

    def cdf(self, X, z: float) -> np.ndarray:
        """Conditional CDF at ``z`` for each query, computed as an exact
        rational number and rounded once."""
        leaves = self.apply(X)
        return np.array([float(self._exact_cdf(leaves[:, j], z)) for j in range(leaves.shape[1])])

    def quantiles(self, X, levels) -> np.ndarray:
        """Weighted quantiles, shape ``(n_queries, n_levels)``.

        Level ``p`` maps to the smallest training target whose conditional
        CDF reaches ``p``. Levels ``<= 0`` give the smallest and levels
        ``>= 1`` the largest target carrying positive weight.
        """
        X = self._as_queries(X)
        leaves = self.apply(X)
        kern = get_kernels(self.backend)
        W = kern.leaf_weights(self.train_leaves_, self.leaf_size_, leaves, self._index)
        levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
        out, risky = _locate(W, self.train_targets_, levels, self._order)
        for j, c in risky:
            out[j, c] = self._exact_quantile(leaves[:, j], W[j], float(levels[c]))
        return out

    # -- exact rational evaluation near level boundaries ------------------

    def _exact_cdf(self, query_leaves: np.ndarray, z: float) -> Fraction:
        K = self.n_trees
        total = Fraction(0)
        for k in range(K):
            members = self.train_leaves_[k] == query_leaves[k]
            below = int(np.count_nonzero(self.train_targets_[members] <= z))
            total += Fraction(below, int(self.leaf_size_[k, query_leaves[k]]))
        return total / K

    def _exact_quantile(self, query_leaves: np.ndarray, w_row: np.ndarray, p: float) -> float:
        support = np.unique(self.train_targets_[w_row > 0])
        target = Fraction(p)
        lo, hi = 0, len(support) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if self._exact_cdf(query_leaves, support[mid]) >= target:
                hi = mid
            else:
                lo = mid + 1
        return float(support[lo])


def _locate(W, targets, levels, order):
    """Cumulative-sum quantile lookup; also returns ``(row, level)`` pairs whose
    cumulative weight sits within ``_BOUNDARY_TOL`` of the level."""
    Ws = W[:, order]
    ys = targets[order]
    m, n = Ws.shape
    cum = np.cumsum(Ws, axis=1)
    positive = Ws > 0
    first = np.argmax(positive, axis=1)
    last = n - 1 - np.argmax(positive[:, ::-1], axis=1)
    out = np.empty((m, len(levels)))
    risky = []
    rows = np.arange(m)
    for c, p in enumerate(levels):
        if p <= 0.0:
            out[:, c] = ys[first]
            continue
        if p >= 1.0:
            out[:, c] = ys[last]
            continue
        idx = np.minimum((cum < p).sum(axis=1), last)
        hi = cum[rows, idx]
        lo = np.where(idx > 0, cum[rows, np.maximum(idx - 1, 0)], -np.inf)
        out[:, c] = ys[idx]
        near = (np.abs(hi - p) < _BOUNDARY_TOL) | (np.abs(lo - p) < _BOUNDARY_TOL)
        risky.extend((int(j), c) for j in np.flatnonzero(near))
    return out, risky


def weighted_quantiles(W, targets, levels, order=None) -> np.ndarray:
    """Quantiles ``inf{z : sum_i W[j, i] 1[targets_i <= z] >= p}`` per row.

    Located with cumulative sums; rows whose cumulative weight lands within
    ``1e-9`` of a level are resolved again with exactly rounded prefix sums.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
    order = np.argsort(targets, kind="stable") if order is None else order
    out, risky = _locate(W, targets, levels, order)
    if risky:
        Ws = W[:, order]
        ys = targets[order]
        n = Ws.shape[1]
        for j, c in risky:
            last = n - 1 - int(np.argmax(Ws[j, ::-1] > 0))
            out[j, c] = ys[_exact_locate(Ws[j], float(levels[c]), last)]
    return out


def _exact_locate(w_sorted: np.ndarray, p: float, last: int) -> int:
    """First index whose exactly rounded prefix sum reaches ``p``."""
    lo, hi = 0, last
    if math.fsum(w_sorted[: last + 1]) < p:
        return last
    while lo < hi:
        mid = (lo + hi) // 2
        if math.fsum(w_sorted[: mid + 1]) >= p:
            hi = mid
        else:
            lo = mid + 1
    return lo


def fit_forest(samples, targets, params: ForestParams = ForestParams(), backend: str | None = None) -> QuantileForest:
    return QuantileForest(params, backend=backend).fit(samples, targets)


def predict_mean(forest: QuantileForest, x) -> float:
    return float(forest.predict(x)[0])


def leaf_weights(forest: QuantileForest, x) -> dict[int, float]:
    """Sparse weight vector for a single query: sample index -> weight."""
    row = forest.weights(x)[0]
    nz = np.flatnonzero(row)
    return {int(i): float(row[i]) for i in nz}


def conditional_cdf(forest: QuantileForest, x, z: float) -> float:
    return float(forest.cdf(x, z)[0])


def quantile(forest: QuantileForest, x, p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    return float(forest.quantiles(x, [p])[0, 0])
