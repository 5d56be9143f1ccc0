"""Pure-numpy forest kernels.

Reference path for the numba kernels in ``_numba_kernels``; both follow the
same arithmetic order so they build bit-identical trees:

* samples inside a node stay in ascending bootstrap-position order
  (stable partitions);
* per feature, samples are sorted by (value, original row, position) and
  split gains use the sequential cumulative sum of targets in that order;
* the leaf value is the sequential sum of targets in position order / n.
"""

from __future__ import annotations

import numpy as np


def node_capacity(n: int, min_leaf: int) -> int:
    return 2 * (n // min_leaf) + 1


def _best_split(Xn, yn, rn, features, min_leaf):
    n = len(yn)
    best_gain = -np.inf
    best_f = -1
    best_thr = 0.0
    nl = np.arange(1, n)
    nr = n - nl
    for f in features:
        order = np.lexsort((rn, Xn[:, f]))
        xs = Xn[order, f]
        cs = np.cumsum(yn[order])
        total = cs[-1]
        sl = cs[:-1]
        sr = total - sl
        gain = sl * sl / nl + sr * sr / nr
        valid = (nl >= min_leaf) & (nr >= min_leaf) & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_gain = gain[i]
            best_f = int(f)
            a, b = xs[i], xs[i + 1]
            thr = (a + b) / 2.0
            if thr >= b:
                thr = a
            best_thr = thr
    return best_gain, best_f, best_thr


def build_tree(X, y, min_leaf, max_depth, n_sub, keys, rows=None):
    """Grow one CART regression tree on ``(X, y)``.

    ``keys`` holds one row of random priorities per node id; a node searches
    the ``n_sub`` features with the smallest keys. When ``n_sub`` equals the
    number of columns ``keys`` is ignored. ``rows`` names the original
    training row behind each sample (bootstrap draws) and only breaks ties.
    Returns node arrays truncated to the number of nodes.
    """
    n, d = X.shape
    rows = np.arange(n) if rows is None else np.asarray(rows)
    cap = node_capacity(n, min_leaf)
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    all_features = np.arange(d)

    n_nodes = 1
    stack = [(0, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        m = len(idx)
        total = np.cumsum(yn)[-1]
        value[node] = total / m
        if m < 2 * min_leaf or yn.min() == yn.max():
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue
        if n_sub < d:
            features = np.sort(np.argsort(keys[node], kind="mergesort")[:n_sub])
        else:
            features = all_features
        Xn = X[idx]
        gain, f, thr = _best_split(Xn, yn, rows[idx], features, min_leaf)
        if f < 0 or not gain > total * total / m:
            continue
        go_left = Xn[:, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        n_nodes += 2
        stack.append((right[node], idx[~go_left], depth + 1))
        stack.append((left[node], idx[go_left], depth + 1))
    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        value[:n_nodes],
    )


def build_forest(X, y, boot, min_leaf, max_depth, n_sub, keys):
    """Grow ``len(boot)`` trees; tree ``k`` is fit on rows ``boot[k]``.

    Returns padded ``(K, max_nodes)`` node arrays and the node counts.
    """
    K = boot.shape[0]
    trees = []
    for k in range(K):
        rows = boot[k]
        trees.append(build_tree(X[rows], y[rows], min_leaf, max_depth, n_sub, keys[k], rows))
    width = max(len(t[0]) for t in trees)
    feature = np.full((K, width), -1, dtype=np.int64)
    threshold = np.zeros((K, width))
    left = np.full((K, width), -1, dtype=np.int64)
    right = np.full((K, width), -1, dtype=np.int64)
    value = np.zeros((K, width))
    n_nodes = np.zeros(K, dtype=np.int64)
    for k, (f, t, lc, rc, v) in enumerate(trees):
        m = len(f)
        feature[k, :m], threshold[k, :m], left[k, :m], right[k, :m], value[k, :m] = f, t, lc, rc, v
        n_nodes[k] = m
    return feature, threshold, left, right, value, n_nodes


def apply_forest(feature, threshold, left, right, X):
    """Leaf id reached by each row of ``X`` in each tree, shape ``(K, m)``."""
    K = feature.shape[0]
    m = X.shape[0]
    out = np.zeros((K, m), dtype=np.int64)
    rows = np.arange(m)
    for k in range(K):
        node = np.zeros(m, dtype=np.int64)
        f = feature[k, node]
        active = f >= 0
        while active.any():
            a = rows[active]
            na = node[a]
            go_left = X[a, f[a]] <= threshold[k, na]
            node[a] = np.where(go_left, left[k, na], right[k, na])
            f = feature[k, node]
            active = f >= 0
        out[k] = node
    return out


def predict_mean(value, leaves):
    K = leaves.shape[0]
    acc = np.zeros(leaves.shape[1])
    for k in range(K):
        acc += value[k, leaves[k]]
    return acc / K


def leaf_index(train_leaves, leaf_size):
    return None


def leaf_weights(train_leaves, leaf_size, query_leaves, index=None):
    """Dense ``(m, n)`` quantile-forest weights.

    ``train_leaves[k, i]`` is the leaf of training sample ``i`` in tree ``k``
    and ``leaf_size[k, node]`` the number of training samples in that leaf.
    """
    K, n = train_leaves.shape
    m = query_leaves.shape[1]
    W = np.zeros((m, n))
    for k in range(K):
        ql = query_leaves[k]
        inv = 1.0 / leaf_size[k, ql]
        W += (train_leaves[k][None, :] == ql[:, None]) * inv[:, None]
    return W / K
