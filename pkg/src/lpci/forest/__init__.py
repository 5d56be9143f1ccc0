"""Regression trees, random forests and quantile random forests."""

from lpci.forest._backend import BACKEND, get_kernels
from lpci.forest.forest import (
    ForestParams,
    QuantileForest,
    Tree,
    conditional_cdf,
    fit_forest,
    fit_tree,
    leaf_weights,
    predict_mean,
    quantile,
    weighted_quantiles,
)

__all__ = [
    "BACKEND",
    "ForestParams",
    "QuantileForest",
    "Tree",
    "conditional_cdf",
    "fit_forest",
    "fit_tree",
    "get_kernels",
    "leaf_weights",
    "predict_mean",
    "quantile",
    "weighted_quantiles",
]
