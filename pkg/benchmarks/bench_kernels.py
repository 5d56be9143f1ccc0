"""Time forest fitting and quantile queries on the numba and numpy backends.

    python benchmarks/bench_kernels.py --n 3000 --d 11 --trees 100 --repeat 3
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from lpci.forest import ForestParams, QuantileForest
from lpci.forest._backend import BACKEND


def _best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench(backend, X, y, Xq, params, repeat):
    forest = QuantileForest(params, backend=backend)
    t_fit, forest = _best_of(lambda: forest.fit(X, y), repeat)
    levels = np.linspace(0.0, 0.1, 20)
    levels = np.concatenate([levels, 0.9 + levels])
    t_q, q = _best_of(lambda: forest.quantiles(Xq, levels), repeat)
    return t_fit, t_q, q


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--d", type=int, default=11)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    X = rng.standard_normal((args.n, args.d))
    y = X[:, 0] + rng.standard_normal(args.n) * (1 + np.abs(X[:, 1]))
    Xq = rng.standard_normal((args.queries, args.d))
    params = ForestParams(n_trees=args.trees, seed=1)

    backends = ["numpy"] + (["numba"] if BACKEND == "numba" else [])
    if "numba" in backends:
        # compile outside the timed region
        QuantileForest(params.replace(n_trees=2), backend="numba").fit(X[:50], y[:50]).quantiles(Xq[:2], [0.5])

    results = {}
    print(f"n={args.n} d={args.d} trees={args.trees} queries={args.queries} (best of {args.repeat})")
    print(f"{'backend':8s} {'fit [s]':>9s} {'quantiles [s]':>14s}")
    for name in backends:
        t_fit, t_q, q = bench(name, X, y, Xq, params, args.repeat)
        results[name] = q
        print(f"{name:8s} {t_fit:9.3f} {t_q:14.3f}")
    if len(results) == 2:
        same = np.array_equal(results["numpy"], results["numba"])
        print(f"identical quantiles across backends: {same}")


if __name__ == "__main__":
    main()
