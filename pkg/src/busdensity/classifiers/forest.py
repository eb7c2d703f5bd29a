"""Random forest of Gini CART trees."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..density import N_CLASSES
from ._common import NotFittedError, check_features, check_training_data, data_digest


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    max_depth: int | None = None
    min_samples_leaf: int = 1
    min_samples_split: int = 2
    max_features: int | str | None = "sqrt"
    bootstrap: bool = True
    seed: int = 0


@dataclass(eq=False)
class Tree:
    """Flat binary tree. ``feature[i] == -1`` marks a leaf; samples go left when x <= threshold."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, 4) class counts of the training samples reaching each node

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.flatnonzero(active)
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        c = self.counts[self.apply(X)]
        return c / c.sum(axis=1, keepdims=True)


@dataclass(eq=False)
class ForestModel:
    trees: list[Tree] | None
    n_features: int = 16
    config: ForestConfig = field(default_factory=ForestConfig)
    data_digest: str = ""

    kind = "forest"

    @property
    def seed(self) -> int:
        return self.config.seed

    def predict_proba(self, X) -> np.ndarray:
        if not self.trees:
            raise NotFittedError("forest model is not trained")
        X, single = check_features(X, self.n_features)
        p = np.zeros((X.shape[0], N_CLASSES))
        for tree in self.trees:
            p += tree.predict_proba(X)
        p /= len(self.trees)
        return p[0] if single else p


def gini(counts: np.ndarray) -> np.ndarray:
    n = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = 1.0 - np.sum(counts * counts, axis=-1) / (n * n)
    return np.where(n > 0, g, 0.0)


def _n_candidate_features(max_features, d: int) -> int:
    if max_features is None:
        return d
    if max_features == "sqrt":
        return max(1, int(np.sqrt(d)))
    if max_features == "log2":
        return max(1, int(np.log2(d)))
    if isinstance(max_features, float):
        return max(1, int(max_features * d))
    return max(1, min(int(max_features), d))


def _best_split(X, Y, idx, features, min_leaf):
    """Lowest weighted Gini split over the given features: (feature, threshold) or None."""
    n = idx.size
    total = Y[idx].sum(axis=0)
    best = (np.inf, -1, 0.0)
    for f in features:
        x = X[idx, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        left = np.cumsum(Y[idx[order]], axis=0)[:-1]  # counts for first i+1 samples
        right = total - left
        nl = np.arange(1, n)
        ok = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not np.any(ok):
            continue
        imp = (nl * gini(left) + (n - nl) * gini(right)) / n
        imp = np.where(ok, imp, np.inf)
        i = int(np.argmin(imp))
        if imp[i] < best[0]:
            thr = 0.5 * (xs[i] + xs[i + 1])
            if thr >= xs[i + 1]:  # midpoint rounded up to the next value
                thr = xs[i]
            best = (imp[i], f, thr)
    return None if best[1] < 0 else (best[1], best[2])


def build_tree(X, y, config: ForestConfig, rng: np.random.Generator, sample_idx=None) -> Tree:
    n, d = X.shape
    Y = np.eye(N_CLASSES)[y]
    k = _n_candidate_features(config.max_features, d)
    idx0 = np.arange(n) if sample_idx is None else np.asarray(sample_idx)

    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(Y[idx].sum(axis=0))
        return len(feature) - 1

    stack = [(new_node(idx0), idx0, 0)]
    while stack:
        node, idx, depth = stack.pop()
        c = counts[node]
        if (
            np.count_nonzero(c) <= 1
            or idx.size < config.min_samples_split
            or idx.size < 2 * config.min_samples_leaf
            or (config.max_depth is not None and depth >= config.max_depth)
        ):
            continue
        # Visit features in random order until k non-constant ones have been tried.
        chosen = []
        for f in rng.permutation(d):
            col = X[idx, f]
            if col.min() < col.max():
                chosen.append(f)
                if len(chosen) == k:
                    break
        split = _best_split(X, Y, idx, chosen, config.min_samples_leaf) if chosen else None
        if split is None:
            continue
        f, thr = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = int(f), float(thr)
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(counts, dtype=np.float64),
    )


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("BUSDENSITY_THREADS", "1")))
    except ValueError:
        return 1


def train_forest(X, y, config: ForestConfig = ForestConfig(), n_jobs: int | None = None) -> ForestModel:
    """Bagged Gini trees with per-node feature subsampling.

    Tree ``i`` draws its bootstrap sample and feature orders from a generator
    seeded with ``config.seed ^ i``, so results do not depend on ``n_jobs``.
    """
    X, y = check_training_data(X, y)
    n = X.shape[0]

    def fit_one(i):
        rng = np.random.default_rng(config.seed ^ i)
        sample = rng.integers(0, n, size=n) if config.bootstrap else None
        return build_tree(X, y, config, rng, sample)

    jobs = n_jobs or _thread_cap()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(fit_one, range(config.n_trees)))
    else:
        trees = [fit_one(i) for i in range(config.n_trees)]
    return ForestModel(trees, X.shape[1], config, data_digest(X, y))
