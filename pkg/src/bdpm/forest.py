"""CART classification trees and a bootstrap random forest.

Trees are stored as flat parallel arrays (one entry per node) rather than
linked node objects; node 0 is the root and ``feature == -1`` marks a leaf.
Importances follow the mean-decrease-in-impurity recipe: every split adds its
impurity decrease, weighted by the fraction of bootstrap samples reaching the
node, to its feature; the per-tree sums are averaged and normalised to 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .dataset import HEALTHY, PD

LEAF = -1


def gini_impurity(class_counts) -> float:
    counts = np.asarray(class_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini impurity of an empty node is undefined")
    p = counts / total
    return float(1.0 - np.sum(p * p))


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int | None = None
    min_samples_split: int = 2
    features_per_split: int | None = None  # None -> ceil(sqrt(n_features))
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")

    def resolve_features_per_split(self, n_features: int) -> int:
        if self.features_per_split is None:
            return max(1, math.ceil(math.sqrt(n_features)))
        if self.features_per_split > n_features:
            raise ValueError(
                f"features_per_split={self.features_per_split} exceeds n_features={n_features}"
            )
        return self.features_per_split


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray         # int, LEAF for leaves
    threshold: np.ndarray       # go left when x[feature] <= threshold
    impurity_decrease: np.ndarray  # parent gini minus weighted child gini
    left: np.ndarray
    right: np.ndarray
    class_counts: np.ndarray    # (n_nodes, 2): Healthy, PD
    n_node_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_splits(self) -> int:
        return int(np.sum(self.feature != LEAF))

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("feature", "threshold", "impurity_decrease", "left", "right", "class_counts")
        )

    __hash__ = None

    def apply(self, x) -> int:
        node = 0
        while self.feature[node] != LEAF:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return node


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: list
    n_features: int
    params: ForestParams
    seed: int
    degenerate: bool = field(default=False)

    def __eq__(self, other):
        if not isinstance(other, ForestModel):
            return NotImplemented
        return (
            self.n_features == other.n_features
            and self.params == other.params
            and self.seed == other.seed
            and len(self.trees) == len(other.trees)
            and all(a == b for a, b in zip(self.trees, other.trees))
        )

    __hash__ = None


@numba.njit(cache=True)
def _gini2(a, b):
    t = a + b
    if t == 0:
        return 0.0
    pa = a / t
    pb = b / t
    return 1.0 - pa * pa - pb * pb


@numba.njit(cache=True)
def _grow_tree(XT, y, work, k_features, max_depth, min_samples_split,
               feature, threshold, decrease, left, right, counts, n_samples):
    """Grow one tree on the rows listed in ``work`` into the given node buffers.

    XT is features x samples so each feature scan is contiguous. Returns the
    node count; child links are local to this tree.
    """
    n_feat = XT.shape[0]
    m = work.shape[0]
    cap = 2 * m + 1

    # stack of (node id, start, end, depth)
    stack = np.empty((cap, 4), dtype=np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m
    stack[0, 3] = 0
    top = 1
    n_nodes = 1

    perm = np.arange(n_feat)
    vals = np.empty(m, dtype=np.float64)
    labs = np.empty(m, dtype=np.int64)
    cand = np.empty(n_feat, dtype=np.int64)

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        size = end - start

        c0 = 0
        c1 = 0
        for s in range(start, end):
            if y[work[s]] == 1:
                c1 += 1
            else:
                c0 += 1
        counts[node, 0] = c0
        counts[node, 1] = c1
        n_samples[node] = size
        parent_gini = _gini2(c0, c1)

        if parent_gini == 0.0 or size < min_samples_split or (max_depth > 0 and depth >= max_depth):
            continue

        # features are visited in random order until k non-constant ones are seen
        for a in range(n_feat):
            perm[a] = a
        n_cand = 0
        visited = 0
        while visited < n_feat and n_cand < k_features:
            r = visited + np.random.randint(0, n_feat - visited)
            tmp = perm[visited]
            perm[visited] = perm[r]
            perm[r] = tmp
            f = perm[visited]
            visited += 1
            col = XT[f]
            lo = col[work[start]]
            hi = lo
            for s in range(start + 1, end):
                v = col[work[s]]
                if v < lo:
                    lo = v
                if v > hi:
                    hi = v
            if hi > lo:
                cand[n_cand] = f
                n_cand += 1
        if n_cand == 0:
            continue
        cand_sorted = np.sort(cand[:n_cand])

        best_gain = -1.0
        best_f = -1
        best_t = 0.0
        for ci in range(n_cand):
            f = cand_sorted[ci]
            col = XT[f]
            # stable insertion sort of (value, label) pairs; nodes are small
            for s in range(size):
                v = col[work[start + s]]
                lab = y[work[start + s]]
                q = s
                while q > 0 and vals[q - 1] > v:
                    vals[q] = vals[q - 1]
                    labs[q] = labs[q - 1]
                    q -= 1
                vals[q] = v
                labs[q] = lab
            l0 = 0
            l1 = 0
            for q in range(size - 1):
                if labs[q] == 1:
                    l1 += 1
                else:
                    l0 += 1
                v_here = vals[q]
                v_next = vals[q + 1]
                if v_next <= v_here:
                    continue
                nl = l0 + l1
                nr = size - nl
                child = (nl * _gini2(l0, l1) + nr * _gini2(c0 - l0, c1 - l1)) / size
                gain = parent_gini - child
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_t = v_here + (v_next - v_here) / 2.0
                    if best_t >= v_next:
                        best_t = v_here

        if best_f < 0:
            continue
        if best_gain < 0.0:
            best_gain = 0.0

        # partition work[start:end] in place, left side first
        i = start
        j = end - 1
        while i <= j:
            if XT[best_f, work[i]] <= best_t:
                i += 1
            else:
                tmp = work[i]
                work[i] = work[j]
                work[j] = tmp
                j -= 1

        feature[node] = best_f
        threshold[node] = best_t
        decrease[node] = best_gain
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is numbered first
        stack[top, 0] = rnode
        stack[top, 1] = i
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = lnode
        stack[top, 1] = start
        stack[top, 2] = i
        stack[top, 3] = depth + 1
        top += 1

    return n_nodes


@numba.njit(cache=True)
def _grow_forest(XT, y, tree_seeds, bootstrap, k_features, max_depth, min_samples_split):
    n = XT.shape[1]
    n_trees = tree_seeds.shape[0]
    cap = 2 * n + 1
    total = n_trees * cap
    feature = np.full(total, -1, dtype=np.int64)
    threshold = np.zeros(total, dtype=np.float64)
    decrease = np.zeros(total, dtype=np.float64)
    left = np.full(total, -1, dtype=np.int64)
    right = np.full(total, -1, dtype=np.int64)
    counts = np.zeros((total, 2), dtype=np.int64)
    n_samples = np.zeros(total, dtype=np.int64)
    sizes = np.zeros(n_trees, dtype=np.int64)
    work = np.empty(n, dtype=np.int64)
    for t in range(n_trees):
        np.random.seed(tree_seeds[t])
        for s in range(n):
            work[s] = np.random.randint(0, n) if bootstrap else s
        a = t * cap
        b = a + cap
        sizes[t] = _grow_tree(XT, y, work, k_features, max_depth, min_samples_split,
                              feature[a:b], threshold[a:b], decrease[a:b], left[a:b],
                              right[a:b], counts[a:b], n_samples[a:b])
    return feature, threshold, decrease, left, right, counts, n_samples, sizes


def _tree_seeds(seed: int, n_trees: int) -> np.ndarray:
    # one independent 31-bit stream seed per tree, all derived from ``seed``
    state = np.random.SeedSequence(seed).generate_state(n_trees, dtype=np.uint32)
    return (state & 0x7FFFFFFF).astype(np.int64)


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("X must be a non-empty samples x features matrix")
    if y.shape != (X.shape[0],):
        raise ValueError("y must have one label per row of X")
    if not np.isin(y, (HEALTHY, PD)).all():
        raise ValueError("labels must be 0 (Healthy) or 1 (PD)")
    if np.unique(y).size < 2:
        raise ValueError("fit_forest needs both classes in y")
    return X, y


def fit_forest(X, y, params: ForestParams | None = None, seed: int = 0) -> ForestModel:
    params = params or ForestParams()
    X, y = _check_xy(X, y)
    n, n_features = X.shape
    k = params.resolve_features_per_split(n_features)
    max_depth = params.max_depth or 0
    XT = np.ascontiguousarray(X.T)
    flat = _grow_forest(XT, y, _tree_seeds(seed, params.n_trees), params.bootstrap, k,
                        max_depth, params.min_samples_split)
    sizes = flat[-1]
    cap = 2 * n + 1
    trees = []
    for t, size in enumerate(sizes):
        a = t * cap
        trees.append(Tree(*(arr[a:a + size] for arr in flat[:-1])))
    degenerate = all(t.n_splits == 0 for t in trees)
    return ForestModel(trees, n_features, params, seed, degenerate)


def tree_importance(tree: Tree, n_features: int) -> np.ndarray:
    scores = np.zeros(n_features)
    internal = tree.feature != LEAF
    if not np.any(internal):
        return scores
    weight = tree.n_node_samples[internal] / tree.n_node_samples[0]
    np.add.at(scores, tree.feature[internal], weight * tree.impurity_decrease[internal])
    return scores


def feature_importance(model: ForestModel) -> np.ndarray:
    """Normalised mean decrease in Gini impurity; all zeros for split-free forests."""
    total = np.zeros(model.n_features)
    for tree in model.trees:
        total += tree_importance(tree, model.n_features)
    total /= len(model.trees)
    s = total.sum()
    if s <= 0:
        return np.zeros(model.n_features)
    return total / s


def _leaf_vote(tree: Tree, x) -> int:
    healthy, pd = tree.class_counts[tree.apply(x)]
    return PD if pd > healthy else HEALTHY


def forest_predict(model: ForestModel, x) -> tuple[int, float]:
    """Majority vote and the fraction of trees backing it; ties go to Healthy."""
    if not model.trees:
        raise ValueError("cannot predict with an empty forest")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise ValueError(f"expected {model.n_features} features, got shape {x.shape}")
    pd_votes = sum(_leaf_vote(t, x) for t in model.trees)
    n = len(model.trees)
    if pd_votes * 2 > n:
        return PD, pd_votes / n
    return HEALTHY, (n - pd_votes) / n


def forest_pd_fraction(model: ForestModel, X) -> np.ndarray:
    """Fraction of trees voting PD for every row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if not model.trees:
        raise ValueError("cannot predict with an empty forest")
    votes = np.array([[_leaf_vote(t, row) for t in model.trees] for row in X], dtype=np.float64)
    return votes.mean(axis=1)
