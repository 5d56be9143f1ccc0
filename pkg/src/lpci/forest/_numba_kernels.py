"""Numba forest kernels.

Same algorithm and floating-point order as ``_numpy_kernels``. Instead of
sorting inside every node, every feature is sorted once per forest; each
tree derives its bootstrap orderings from that in O(n d) and keeps ``d + 1``
index lists (position order plus one per feature) that are
stable-partitioned at every split.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _build_tree(X, y, lists, min_leaf, max_depth, n_sub, keys, feature, threshold, left, right, value):
    n, d = X.shape
    go_left = np.zeros(n, np.bool_)
    tmp = np.empty(n, np.int64)
    cap = feature.shape[0]
    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    all_features = np.arange(d)

    n_nodes = 1
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = st_node[top]
        s = st_start[top]
        e = st_end[top]
        depth = st_depth[top]
        m = e - s

        total = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(s, e):
            v = y[lists[0, i]]
            total += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        value[node] = total / m
        if m < 2 * min_leaf or ymin == ymax:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue
        if n_sub < d:
            features = np.sort(np.argsort(keys[node], kind="mergesort")[:n_sub])
        else:
            features = all_features

        best_gain = -np.inf
        best_f = -1
        best_thr = 0.0
        for fi in range(features.shape[0]):
            f = features[fi]
            row = lists[1 + f]
            ftotal = 0.0
            for i in range(s, e):
                ftotal += y[row[i]]
            sl = 0.0
            local_gain = -np.inf
            local_i = -1
            for i in range(m - 1):
                p = row[s + i]
                sl += y[p]
                nl = i + 1
                nr = m - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                if not X[p, f] < X[row[s + i + 1], f]:
                    continue
                sr = ftotal - sl
                g = sl * sl / nl + sr * sr / nr
                if g > local_gain:
                    local_gain = g
                    local_i = i
            if local_i >= 0 and local_gain > best_gain:
                best_gain = local_gain
                best_f = f
                a = X[row[s + local_i], f]
                b = X[row[s + local_i + 1], f]
                thr = (a + b) / 2.0
                if thr >= b:
                    thr = a
                best_thr = thr
        if best_f < 0 or not best_gain > total * total / m:
            continue

        n_left = 0
        for i in range(s, e):
            p = lists[0, i]
            gl = X[p, best_f] <= best_thr
            go_left[p] = gl
            if gl:
                n_left += 1
        for r in range(d + 1):
            a = 0
            b = n_left
            for i in range(s, e):
                p = lists[r, i]
                if go_left[p]:
                    tmp[a] = p
                    a += 1
                else:
                    tmp[b] = p
                    b += 1
            for i in range(m):
                lists[r, s + i] = tmp[i]

        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        left[node] = lc
        right[node] = rc
        n_nodes += 2
        st_node[top] = rc
        st_start[top] = s + n_left
        st_end[top] = e
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_start[top] = s
        st_end[top] = s + n_left
        st_depth[top] = depth + 1
        top += 1
    return n_nodes


@njit(cache=True)
def _build_forest(X, y, boot, min_leaf, max_depth, n_sub, keys, feature, threshold, left, right, value, n_nodes):
    K, nb = boot.shape
    n, d = X.shape
    global_order = np.empty((d, n), np.int64)
    for f in range(d):
        global_order[f] = np.argsort(X[:, f], kind="mergesort")
    Xb = np.empty((nb, d))
    yb = np.empty(nb)
    lists = np.empty((d + 1, nb), np.int64)
    counts = np.zeros(n + 1, np.int64)
    by_orig = np.empty(nb, np.int64)
    fill = np.empty(n, np.int64)
    for k in range(K):
        rows = boot[k]
        counts[:] = 0
        for i in range(nb):
            r = rows[i]
            for c in range(d):
                Xb[i, c] = X[r, c]
            yb[i] = y[r]
            lists[0, i] = i
            counts[r + 1] += 1
        for r in range(n):
            counts[r + 1] += counts[r]
            fill[r] = counts[r]
        for i in range(nb):
            r = rows[i]
            by_orig[fill[r]] = i
            fill[r] += 1
        for f in range(d):
            a = 0
            go = global_order[f]
            for t in range(n):
                r = go[t]
                for u in range(counts[r], counts[r + 1]):
                    lists[1 + f, a] = by_orig[u]
                    a += 1
        n_nodes[k] = _build_tree(
            Xb, yb, lists, min_leaf, max_depth, n_sub, keys[k],
            feature[k], threshold[k], left[k], right[k], value[k],
        )


def build_forest(X, y, boot, min_leaf, max_depth, n_sub, keys):
    K, n = boot.shape
    cap = 2 * (n // min_leaf) + 1
    feature = np.full((K, cap), -1, dtype=np.int64)
    threshold = np.zeros((K, cap))
    left = np.full((K, cap), -1, dtype=np.int64)
    right = np.full((K, cap), -1, dtype=np.int64)
    value = np.zeros((K, cap))
    n_nodes = np.zeros(K, dtype=np.int64)
    _build_forest(
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(boot, dtype=np.int64),
        int(min_leaf), int(max_depth), int(n_sub),
        np.ascontiguousarray(keys, dtype=np.float64),
        feature, threshold, left, right, value, n_nodes,
    )
    width = int(n_nodes.max())
    return (
        feature[:, :width].copy(),
        threshold[:, :width].copy(),
        left[:, :width].copy(),
        right[:, :width].copy(),
        value[:, :width].copy(),
        n_nodes,
    )


def build_tree(X, y, min_leaf, max_depth, n_sub, keys):
    n = X.shape[0]
    boot = np.arange(n, dtype=np.int64)[None, :]
    f, t, lc, rc, v, nn = build_forest(X, y, boot, min_leaf, max_depth, n_sub, np.asarray(keys)[None])
    return f[0], t[0], lc[0], rc[0], v[0]


@njit(cache=True)
def _apply_forest(feature, threshold, left, right, X, out):
    K = feature.shape[0]
    m = X.shape[0]
    for k in range(K):
        for j in range(m):
            node = 0
            while feature[k, node] >= 0:
                if X[j, feature[k, node]] <= threshold[k, node]:
                    node = left[k, node]
                else:
                    node = right[k, node]
            out[k, j] = node


def apply_forest(feature, threshold, left, right, X):
    out = np.empty((feature.shape[0], X.shape[0]), dtype=np.int64)
    _apply_forest(feature, threshold, left, right, np.ascontiguousarray(X, dtype=np.float64), out)
    return out


@njit(cache=True)
def predict_mean(value, leaves):
    K, m = leaves.shape
    acc = np.zeros(m)
    for k in range(K):
        for j in range(m):
            acc[j] += value[k, leaves[k, j]]
    return acc / K


@njit(cache=True)
def _leaf_weights_csr(members, offsets, query_leaves, W):
    K = query_leaves.shape[0]
    m = query_leaves.shape[1]
    for k in range(K):
        for j in range(m):
            leaf = query_leaves[k, j]
            a = offsets[k, leaf]
            b = offsets[k, leaf + 1]
            inv = 1.0 / (b - a)
            for t in range(a, b):
                W[j, members[k, t]] += inv


def leaf_index(train_leaves, leaf_size):
    """CSR layout of leaf membership: training samples grouped by leaf id."""
    K = train_leaves.shape[0]
    members = np.argsort(train_leaves, axis=1, kind="stable").astype(np.int64)
    offsets = np.zeros((K, leaf_size.shape[1] + 1), dtype=np.int64)
    np.cumsum(leaf_size, axis=1, out=offsets[:, 1:])
    return members, offsets


def leaf_weights(train_leaves, leaf_size, query_leaves, index=None):
    K, n = train_leaves.shape
    members, offsets = index if index is not None else leaf_index(train_leaves, leaf_size)
    W = np.zeros((query_leaves.shape[1], n))
    _leaf_weights_csr(members, offsets, np.ascontiguousarray(query_leaves), W)
    return W / K
