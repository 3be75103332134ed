"""
Random forest of CART trees with Gini splits.

Features are handled as float32. A split threshold is the float32 midpoint
of two adjacent distinct training values (the lower value if the midpoint
rounds onto the upper one); a sample goes left iff ``x[f] <= threshold``.
Split selection is deterministic: best Gini decrease, then lowest feature
index, then lowest threshold.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..errors import ModelError, ShapeMismatch

DEFAULT_GRID = {"n_estimators": (50, 100, 200), "max_depth": (5, 10, 15, 20)}


@dataclass(frozen=True)
class RandomForestConfig:
    n_estimators: int = 100
    max_depth: int = 10
    features_per_split: int | None = None  # default ceil(sqrt(F))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")

    def to_dict(self):
        return asdict(self)


class DecisionTree:
    """Array-backed binary tree. Leaves have ``feature == -1``."""

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float32)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.value = np.asarray(value, dtype=np.int32)

    @property
    def node_count(self):
        return len(self.feature)

    def depth(self):
        depth = np.zeros(self.node_count, dtype=np.int32)
        for n in range(self.node_count):  # preorder: parents come first
            if self.feature[n] >= 0:
                depth[self.left[n]] = depth[self.right[n]] = depth[n] + 1
        return int(depth.max())

    def apply(self, X):
        """Leaf index reached by each row of X."""
        X = np.asarray(X, dtype=np.float32)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X):
        return self.value[self.apply(X)]

    def same_as(self, other):
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("feature", "threshold", "left", "right", "value")
        )


def _best_split(X, y_onehot, idx, candidates):
    """Best (score, feature, threshold) over candidate features, or None.

    score is sum_c L_c^2 / n_L + sum_c R_c^2 / n_R (weighted counts), which
    is maximal exactly where the weighted Gini impurity is minimal.
    """
    W = y_onehot[idx]
    total = W.sum(axis=0)
    n = total.sum()
    best = None
    for f in candidates:  # ascending, so ties keep the lowest feature index
        x = X[idx, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        cuts = np.flatnonzero(xs[:-1] < xs[1:])
        if cuts.size == 0:
            continue
        left = np.cumsum(W[order], axis=0)[cuts]
        nl = left.sum(axis=1)
        right = total - left
        score = (left ** 2).sum(axis=1) / nl + (right ** 2).sum(axis=1) / (n - nl)
        i = int(np.argmax(score))  # first maximum = lowest threshold
        if best is None or score[i] > best[0]:
            best = (score[i], f, _midpoint(xs[cuts[i]], xs[cuts[i] + 1]))
    return best


def _midpoint(lo, hi):
    mid = np.float32((float(lo) + float(hi)) / 2)
    return mid if lo <= mid < hi else lo


def build_tree(X, y, n_classes, *, max_depth, features_per_split, rng, weights=None):
    """Grow one CART tree on float32 features X and integer labels y."""
    n, F = X.shape
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    y_onehot = np.zeros((n, n_classes))
    y_onehot[np.arange(n), y] = weights
    m = min(features_per_split, F)

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0)):
            lst.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.flatnonzero(weights > 0), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = y_onehot[idx].sum(axis=0)
        value[node] = int(np.argmax(counts))
        if depth >= max_depth or np.count_nonzero(counts) <= 1:
            continue
        candidates = np.sort(rng.choice(F, size=m, replace=False))
        split = _best_split(X, y_onehot, idx, candidates)
        if split is None:
            continue
        _, f, thr = split
        go_left = X[idx, f] <= thr
        feature[node], threshold[node] = int(f), float(thr)
        left[node], right[node] = new_node(), new_node()
        # push right first so the left subtree is numbered first (preorder)
        stack.append((right[node], idx[~go_left], depth + 1))
        stack.append((left[node], idx[go_left], depth + 1))
    return DecisionTree(feature, threshold, left, right, value)


def _tree_seeds(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class RandomForestModel:
    def __init__(self, trees, n_classes, n_features, config: RandomForestConfig):
        self.trees = list(trees)
        self.n_classes = int(n_classes)
        self.n_features = int(n_features)
        self.config = config

    def truncated(self, n_estimators) -> "RandomForestModel":
        return RandomForestModel(self.trees[:n_estimators], self.n_classes, self.n_features,
                                 replace(self.config, n_estimators=n_estimators))

    def tree_predictions(self, X):
        X = self._check(X)
        return np.stack([t.predict(X) for t in self.trees]) if len(X) else np.zeros(
            (len(self.trees), 0), dtype=np.int32)

    def _check(self, X):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeMismatch(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def predict(self, X):
        """Majority vote over trees; returns (classes, vote_fractions)."""
        votes = _vote_counts(self.tree_predictions(X), self.n_classes)
        return np.argmax(votes, axis=1), votes / len(self.trees)

    def same_as(self, other):
        return (len(self.trees) == len(other.trees)
                and all(a.same_as(b) for a, b in zip(self.trees, other.trees)))


def _vote_counts(tree_preds, n_classes):
    T, M = tree_preds.shape
    votes = np.zeros((M, n_classes), dtype=np.int64)
    for row in tree_preds:
        votes[np.arange(M), row] += 1
    return votes


def _validate_training(X, y, n_classes):
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeMismatch(f"features {X.shape} and labels {y.shape} do not line up")
    if len(X) < 2:
        raise ModelError("random forest training needs at least two samples")
    if not np.isfinite(X).all():
        raise ModelError("features must be finite")
    y = y.astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if y.min() < 0 or y.max() >= n_classes:
        raise ModelError("labels must be class indices in [0, n_classes)")
    return X, y, n_classes


def rf_train(X, y, config: RandomForestConfig = RandomForestConfig(), *, n_classes=None,
             n_jobs: int = 1) -> RandomForestModel:
    """Train a forest; identical inputs and seed give identical trees.

    Each tree draws its bootstrap sample and split candidates from its own
    seed (spawned from ``config.seed``), so tree i does not depend on how
    many trees are grown or on ``n_jobs``.
    """
    X, y, n_classes = _validate_training(X, y, n_classes)
    n, F = X.shape
    m = config.features_per_split or math.ceil(math.sqrt(F))
    rngs = _tree_seeds(config.seed, config.n_estimators)

    def grow(rng):
        weights = None
        if config.bootstrap:
            weights = np.bincount(rng.integers(0, n, size=n), minlength=n)
        return build_tree(X, y, n_classes, max_depth=config.max_depth,
                          features_per_split=m, rng=rng, weights=weights)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            trees = list(pool.map(grow, rngs))
    else:
        trees = [grow(r) for r in rngs]
    return RandomForestModel(trees, n_classes, F, config)


def rf_predict(model: RandomForestModel, X):
    return model.predict(X)


@dataclass
class GridSearchResult:
    best_config: RandomForestConfig
    best_model: RandomForestModel
    scores: list  # [{"n_estimators", "max_depth", "accuracy"}], grid order

    def table(self):
        return [dict(s) for s in self.scores]


def rf_grid_search(X, y, X_val, y_val, grid=None, base: RandomForestConfig = RandomForestConfig(),
                   *, n_classes=None, n_jobs: int = 1) -> GridSearchResult:
    """Exhaustive search over n_estimators x max_depth by validation accuracy.

    Ties go to smaller n_estimators, then smaller max_depth. Because tree i
    only depends on its own seed, one forest of max(n_estimators) trees per
    depth is grown and its prefixes scored; every prefix is bit-identical to
    a forest trained with that cell's config.
    """
    grid = dict(DEFAULT_GRID if grid is None else grid)
    estimators = sorted(set(int(v) for v in grid["n_estimators"]))
    depths = sorted(set(int(v) for v in grid["max_depth"]))
    if not estimators or not depths:
        raise ValueError("grid must contain at least one n_estimators and one max_depth")
    X_val = np.asarray(X_val, dtype=np.float32)
    y_val = np.asarray(y_val, dtype=np.int64)
    if len(X_val) == 0:
        raise ModelError("validation set is empty")
    X, y, n_classes = _validate_training(X, y, n_classes)

    scores = []
    forests = {}
    for depth in depths:
        cfg = replace(base, n_estimators=max(estimators), max_depth=depth)
        forest = rf_train(X, y, cfg, n_classes=n_classes, n_jobs=n_jobs)
        forests[depth] = forest
        preds = forest.tree_predictions(X_val)
        for ne in estimators:
            votes = _vote_counts(preds[:ne], n_classes)
            acc = float(np.mean(np.argmax(votes, axis=1) == y_val))
            scores.append({"n_estimators": ne, "max_depth": depth, "accuracy": acc})

    best = max(scores, key=lambda s: (s["accuracy"], -s["n_estimators"], -s["max_depth"]))
    config = replace(base, n_estimators=best["n_estimators"], max_depth=best["max_depth"])
    model = forests[best["max_depth"]].truncated(best["n_estimators"])
    scores.sort(key=lambda s: (s["n_estimators"], s["max_depth"]))
    return GridSearchResult(config, model, scores)


# -- (de)serialisation helpers for the model blob ------------------------------

def forest_to_arrays(model: RandomForestModel):
    arrays = []
    for i, t in enumerate(model.trees):
        for attr in ("feature", "threshold", "left", "right", "value"):
            arrays.append((f"tree{i}.{attr}", getattr(t, attr)))
    return arrays


def forest_from_arrays(arrays, n_classes, n_features, config: RandomForestConfig):
    trees = []
    i = 0
    while f"tree{i}.feature" in arrays:
        trees.append(DecisionTree(*(arrays[f"tree{i}.{a}"]
                                    for a in ("feature", "threshold", "left", "right", "value"))))
        i += 1
    return RandomForestModel(trees, n_classes, n_features, config)
