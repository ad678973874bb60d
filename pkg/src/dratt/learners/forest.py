"""Bagged CART trees with per-split feature subsampling."""
from __future__ import annotations

import numpy as np

from ..errors import DataError
from .base import PROBABILITY, REAL, FittedModel


class Tree:
    """Array-backed binary tree; ``feature == -1`` marks a leaf."""

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=int)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=int)
        self.right = np.asarray(right, dtype=int)
        self.value = np.asarray(value, dtype=float)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                depth[self.left[k]] = depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        node = np.zeros(x.shape[0], dtype=int)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            cur = node[active]
            go_left = x[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] >= 0]
        return self.value[node]


def _impurity(s, s2, n, binary):
    # binary: n * Gini = 2 * (s - s^2/n); real: within-node sum of squares
    if binary:
        return 2.0 * (s - s * s / n)
    return s2 - s * s / n


def _best_split(xn, tn, features, min_leaf, binary):
    """Best (feature, threshold, impurity) over ``features`` or None."""
    n = tn.shape[0]
    best = None
    sizes = np.arange(1, n, dtype=float)
    for f in features:
        order = np.argsort(xn[:, f], kind="stable")
        xs = xn[order, f]
        ts = tn[order]
        cs = np.cumsum(ts)
        cs2 = cs if binary else np.cumsum(ts * ts)
        sl, sl2 = cs[:-1], cs2[:-1]
        sr, sr2 = cs[-1] - sl, cs2[-1] - sl2
        nr = n - sizes
        valid = (xs[:-1] < xs[1:]) & (sizes >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        imp = _impurity(sl, sl2, sizes, binary) + _impurity(sr, sr2, nr, binary)
        imp = np.where(valid, imp, np.inf)
        i = int(np.argmin(imp))
        if best is None or imp[i] < best[2]:
            best = (int(f), 0.5 * (xs[i] + xs[i + 1]), float(imp[i]))
    return best


def fit_tree(x, t, *, max_depth=8, min_leaf=5, max_features=None, binary=None, rng=None) -> Tree:
    """Grow one CART tree: Gini splits for 0/1 targets, variance reduction otherwise."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    n, d = x.shape
    if binary is None:
        binary = bool(np.isin(t, (0.0, 1.0)).all())
    rng = np.random.default_rng(rng)
    m = d if max_features is None else min(max_features, d)

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        value.append(float(t[rows].mean()))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, rows, depth = stack.pop()
        tn = t[rows]
        if depth >= max_depth or rows.size < 2 * min_leaf or np.all(tn == tn[0]) or d == 0:
            continue
        s = tn.sum()
        parent = _impurity(s, s if binary else float(tn @ tn), rows.size, binary)
        feats = rng.choice(d, size=m, replace=False) if m < d else np.arange(d)
        split = _best_split(x[rows], tn, feats, min_leaf, binary)
        if split is None or split[2] >= parent - 1e-12 * max(1.0, abs(parent)):
            continue
        f, thr, _ = split
        go_left = x[rows, f] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        stack.append((right[node], rrows, depth + 1))
        stack.append((left[node], lrows, depth + 1))
    return Tree(feature, threshold, left, right, value)


class ForestModel(FittedModel):
    def __init__(self, trees: list[Tree], target_kind: str):
        self.trees = list(trees)
        self.target_kind = target_kind

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[0])
        for tree in self.trees:
            out += tree.predict(x)
        return out / len(self.trees)


def fit_random_forest(x, t, *, n_trees=200, max_depth=8, min_leaf=5, max_features=None,
                      bootstrap=True, seed=0) -> ForestModel:
    """Average of ``n_trees`` CART trees, each grown on a bootstrap resample.

    ``max_features=None`` samples ``round(sqrt(d))`` candidate features per
    split. Output is deterministic given ``seed``.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    n, d = x.shape
    if t.shape != (n,):
        raise DataError("fit_random_forest: x and t are misaligned")
    if n < min_leaf:
        raise DataError(f"fit_random_forest: {n} rows is fewer than min_leaf={min_leaf}")
    binary = bool(np.isin(t, (0.0, 1.0)).all())
    if max_features is None:
        max_features = max(1, int(round(np.sqrt(d)))) if d else 1
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        rows = rng.integers(0, n, n) if bootstrap else np.arange(n)
        trees.append(fit_tree(x[rows], t[rows], max_depth=max_depth, min_leaf=min_leaf,
                              max_features=max_features, binary=binary,
                              rng=rng.integers(2**63)))
    return ForestModel(trees, PROBABILITY if binary else REAL)
