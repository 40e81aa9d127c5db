"""CART regression/classification trees.

Greedy binary splitting with exhaustive search over midpoints of sorted unique
feature values. Regression maximises the decrease in squared error,
classification the decrease in (weighted) Gini impurity; for 0/1 labels the two
criteria differ only by a factor of 2. Ties go to the lowest feature index, then
the lowest threshold.

Trees are stored as flat preorder arrays; ``feature == -1`` marks a leaf.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConfigurationError, ShapeError
from .rng import RngStream

LEAF = -1
_MIN_GAIN = 1e-12


@numba.njit(cache=True)
def _seed(seed):
    np.random.seed(seed)


@numba.njit(cache=True)
def _grow(V, y, rows, max_depth, min_leaf, n_sub, gain_factor):
    n = rows.shape[0]
    p = V.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)

    idx = rows.copy()
    buf = np.empty(n, np.int64)
    feats = np.arange(p)

    # stack of (start, end, depth, parent, side)
    stack = np.empty((cap, 5), np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = n
    stack[0, 2] = 0
    stack[0, 3] = -1
    stack[0, 4] = 0
    top = 1
    n_nodes = 0

    while top > 0:
        top -= 1
        start = stack[top, 0]
        end = stack[top, 1]
        depth = stack[top, 2]
        parent = stack[top, 3]
        side = stack[top, 4]

        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if side == 0:
                left[parent] = node
            else:
                right[parent] = node

        m = end - start
        total = 0.0
        for k in range(start, end):
            total += y[idx[k]]
        value[node] = total / m

        if depth >= max_depth or m < 2 * min_leaf:
            continue

        # feature subsample (partial Fisher-Yates), then scan in ascending index order
        if n_sub < p:
            for a in range(n_sub):
                b = a + int(np.random.random() * (p - a))
                if b >= p:
                    b = p - 1
                tmp = feats[a]
                feats[a] = feats[b]
                feats[b] = tmp
            cand = np.sort(feats[:n_sub].copy())
        else:
            cand = feats.copy()

        parent_term = total * total / m
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        vals = np.empty(m)
        ys = np.empty(m)
        for f in cand:
            for k in range(m):
                vals[k] = V[idx[start + k], f]
            order = np.argsort(vals, kind="mergesort")
            for k in range(m):
                ys[k] = y[idx[start + order[k]]]
            s_left = 0.0
            for k in range(min_leaf - 1):
                s_left += ys[k]
            for pos in range(min_leaf, m - min_leaf + 1):
                s_left += ys[pos - 1]
                lo = vals[order[pos - 1]]
                hi = vals[order[pos]]
                if not lo < hi:
                    continue
                s_right = total - s_left
                gain = gain_factor * (s_left * s_left / pos + s_right * s_right / (m - pos) - parent_term)
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_thr = 0.5 * (lo + hi)
                    if best_thr >= hi:  # midpoint rounding on adjacent floats
                        best_thr = lo

        if best_f < 0 or best_gain <= _MIN_GAIN:
            continue

        # stable partition of idx[start:end]
        nl = 0
        for k in range(start, end):
            if V[idx[k], best_f] <= best_thr:
                buf[nl] = idx[k]
                nl += 1
        nr = nl
        for k in range(start, end):
            if V[idx[k], best_f] > best_thr:
                buf[nr] = idx[k]
                nr += 1
        for k in range(m):
            idx[start + k] = buf[k]

        feature[node] = best_f
        threshold[node] = best_thr
        # push right first so the left subtree is emitted next (preorder)
        stack[top, 0] = start + nl
        stack[top, 1] = end
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 1
        top += 1
        stack[top, 0] = start
        stack[top, 1] = start + nl
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 0
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


@numba.njit(cache=True)
def _predict(V, feature, threshold, left, right, value):
    out = np.empty(V.shape[0])
    for r in range(V.shape[0]):
        node = 0
        while feature[node] >= 0:
            if V[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out


@dataclass(frozen=True, eq=False)
class CartTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    task: str = "regression"
    n_features: int = 0

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.feature[node] != LEAF:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best

    def predict(self, V) -> np.ndarray:
        V = np.ascontiguousarray(V, dtype=float)
        if V.ndim != 2 or V.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} feature columns, got shape {V.shape}")
        return _predict(V, self.feature, self.threshold, self.left, self.right, self.value)

    def with_values(self, value) -> "CartTree":
        return CartTree(self.feature, self.threshold, self.left, self.right,
                        np.asarray(value, dtype=float), self.task, self.n_features)

    def leaf_index(self, V) -> np.ndarray:
        """Leaf node id reached by each row."""
        leaf_ids = np.where(self.feature == LEAF, np.arange(self.n_nodes), -1).astype(float)
        return _predict(np.ascontiguousarray(V, dtype=float), self.feature, self.threshold,
                        self.left, self.right, leaf_ids).astype(np.int64)


def default_feature_subsample(n_features: int, task: str) -> int:
    if task == "classification":
        return max(1, math.ceil(math.sqrt(n_features)))
    return max(1, math.ceil(n_features / 3))


def train_cart(
    V,
    x,
    *,
    task: str = "regression",
    max_depth: int = 25,
    min_leaf: int = 5,
    feature_subsample: int | None = None,
    rng: RngStream | None = None,
    sample_index=None,
) -> CartTree:
    """Grow one CART tree on rows ``sample_index`` (default: all rows, repeats allowed).

    ``feature_subsample=None`` considers every feature at every split.
    """
    if task not in ("regression", "classification"):
        raise ConfigurationError(f"unknown task {task!r}")
    V = np.ascontiguousarray(V, dtype=float)
    x = np.ascontiguousarray(x, dtype=float).ravel()
    if V.ndim != 2 or V.shape[0] != x.shape[0]:
        raise ShapeError(f"features {V.shape} do not match labels {x.shape}")
    rows = np.arange(x.shape[0]) if sample_index is None else np.asarray(sample_index, dtype=np.int64)
    if min_leaf < 1 or max_depth < 0:
        raise ConfigurationError("min_leaf must be >= 1 and max_depth >= 0")
    if rows.shape[0] < 2 * min_leaf:
        raise ConfigurationError(f"need at least {2 * min_leaf} samples, got {rows.shape[0]}")
    if task == "classification" and not np.isin(x[rows], (0.0, 1.0)).all():
        raise ConfigurationError("classification labels must be 0/1")
    p = V.shape[1]
    n_sub = p if feature_subsample is None else int(feature_subsample)
    if not 1 <= n_sub <= p:
        raise ConfigurationError(f"feature_subsample must lie in [1, {p}]")
    if n_sub < p:
        _seed((rng or RngStream(0)).int_seed() % (2**32 - 1))
    gain_factor = 2.0 if task == "classification" else 1.0
    arrays = _grow(V, x, rows, int(max_depth), int(min_leaf), n_sub, gain_factor)
    return CartTree(*arrays, task=task, n_features=p)
