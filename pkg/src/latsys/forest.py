"""Random forest classifier: bootstrap samples, random feature subspaces,
Gini splits, hard-vote prediction and out-of-bag scoring.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from latsys.core_types import InputDomainError

FOREST_FORMAT_VERSION = 1
LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_features: Optional[int] = None  # None -> ceil(sqrt(d))
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise InputDomainError("n_trees must be >= 1")
        if self.min_samples_split < 2:
            raise InputDomainError("min_samples_split must be >= 2")

    def features_per_split(self, n_features: int) -> int:
        k = self.max_features or math.ceil(math.sqrt(n_features))
        if not 1 <= k <= n_features:
            raise InputDomainError(
                f"max_features={k} outside [1, {n_features}]")
        return k


@dataclass
class SplitRecord:
    """Debug log entry: every candidate scored at one node."""

    node: int
    chosen: tuple[int, float, float]  # (feature, threshold, gain)
    candidates: list[tuple[int, float, float]]


@dataclass
class DecisionTree:
    """Array-backed binary tree. ``feature[i] == LEAF`` marks a leaf."""

    n_classes: int
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    counts: list[list[int]] = field(default_factory=list)
    split_log: Optional[list[SplitRecord]] = None

    def _add(self, counts: np.ndarray) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.counts.append([int(c) for c in counts])
        return len(self.feature) - 1

    def leaf_label(self, node: int) -> int:
        return int(np.argmax(self.counts[node]))

    def _arrays(self):
        cache = getattr(self, "_cache", None)
        if cache is None or cache[0].size != len(self.feature):
            counts = np.asarray(self.counts, dtype=np.int64)
            cache = (np.asarray(self.feature, dtype=np.int64),
                     np.asarray(self.threshold, dtype=np.float64),
                     np.asarray(self.left, dtype=np.int64),
                     np.asarray(self.right, dtype=np.int64),
                     np.argmax(counts, axis=1))
            self._cache = cache
        return cache

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.atleast_2d(X)
        feature, threshold, left, right, _ = self._arrays()
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = feature[node] != LEAF
        while active.any():
            idx = np.nonzero(active)[0]
            f = feature[node[idx]]
            go_left = X[idx, f] <= threshold[node[idx]]
            node[idx] = np.where(go_left, left[node[idx]], right[node[idx]])
            active = feature[node] != LEAF
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self._arrays()[4][self.apply(X)]

    def to_dict(self) -> dict:
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left, "right": self.right, "counts": self.counts}

    @classmethod
    def from_dict(cls, data: dict, n_classes: int) -> "DecisionTree":
        return cls(n_classes=n_classes, feature=list(data["feature"]),
                   threshold=[float(t) for t in data["threshold"]],
                   left=list(data["left"]), right=list(data["right"]),
                   counts=[list(c) for c in data["counts"]])


def gini(counts: np.ndarray) -> np.ndarray:
    """Gini impurity of class-count vectors along the last axis."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1)
    safe = np.where(total > 0, total, 1.0)
    impurity = 1.0 - np.sum((counts / safe[..., None]) ** 2, axis=-1)
    return np.where(total > 0, impurity, 0.0)


def _best_split(X: np.ndarray, y: np.ndarray, features: np.ndarray,
                n_classes: int, log: bool):
    """Best (gain, feature, threshold) over ``features``; ``None`` if no
    feature has two distinct values. Ties go to the smallest feature index,
    then the smallest threshold."""
    n = y.size
    parent = gini(np.bincount(y, minlength=n_classes))
    cols = X[:, features]
    order = np.argsort(cols, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(cols, order, axis=0)
    onehot = np.eye(n_classes, dtype=np.int64)[y]
    # left-side class counts after each prefix, (n-1, k, c)
    left = np.cumsum(onehot[order], axis=0)[:-1]
    total = left[-1] + onehot[order[-1]]
    right = total[None] - left
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    # n_side * gini(side) == n_side - sum(counts**2) / n_side
    sq_left = np.einsum("nkc,nkc->nk", left, left) / n_left
    sq_right = np.einsum("nkc,nkc->nk", right, right) / (n - n_left)
    child = (n - sq_left - sq_right) / n
    gain = parent - child
    valid = sorted_vals[1:] > sorted_vals[:-1]
    gain = np.where(valid, gain, -np.inf)

    col_best = gain.max(axis=0)
    usable = np.isfinite(col_best)
    if not usable.any():
        return None, []
    # among equal gains the first valid position has the smallest threshold
    pos = np.argmax(gain == col_best[None, :], axis=0)
    cols_idx = np.arange(features.size)
    lo_val = sorted_vals[pos, cols_idx]
    hi_val = sorted_vals[pos + 1, cols_idx]
    thr = 0.5 * (lo_val + hi_val)
    thr = np.where(thr >= hi_val, lo_val, thr)  # adjacent floats: the midpoint rounds up

    by_index = [j for j in np.argsort(features, kind="stable") if usable[j]]
    top = max(col_best[j] for j in by_index)
    j = next(j for j in by_index if col_best[j] == top)
    best = (float(col_best[j]), int(features[j]), float(thr[j]))
    candidates = ([(int(features[j]), float(thr[j]), float(col_best[j])) for j in by_index]
                  if log else [])
    return best, candidates


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, params: ForestParams,
              rng: np.random.Generator, *, debug: bool = False) -> DecisionTree:
    n_features = X.shape[1]
    k = params.features_per_split(n_features)
    tree = DecisionTree(n_classes=n_classes, split_log=[] if debug else None)
    root = tree._add(np.bincount(y, minlength=n_classes))
    stack = [(root, np.arange(y.size), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        counts = np.bincount(ys, minlength=n_classes)
        if (np.count_nonzero(counts) <= 1 or idx.size < params.min_samples_split
                or (params.max_depth is not None and depth >= params.max_depth)):
            continue
        perm = rng.permutation(n_features)
        best, candidates = None, []
        # like common library practice, keep drawing features past k only
        # when none of the drawn ones can split the node
        for start in range(0, n_features, k):
            chunk = perm[start:start + k]
            best, candidates = _best_split(X[idx], ys, chunk, n_classes, debug)
            if best is not None:
                break
        if best is None:
            continue
        gain, f, thr = best
        mask = X[idx, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = thr
        left = tree._add(np.bincount(ys[mask], minlength=n_classes))
        right = tree._add(np.bincount(ys[~mask], minlength=n_classes))
        tree.left[node], tree.right[node] = left, right
        if debug:
            tree.split_log.append(SplitRecord(node, (f, thr, gain), candidates))
        stack.append((right, idx[~mask], depth + 1))
        stack.append((left, idx[mask], depth + 1))
    return tree


@dataclass
class Forest:
    params: ForestParams
    n_classes: int
    n_features: int
    trees: list[DecisionTree]
    # per tree, how many times each training row was drawn
    bootstrap_counts: list[np.ndarray]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise InputDomainError(
                f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def tree_votes(self, X: np.ndarray) -> np.ndarray:
        """(n_trees, n_samples) matrix of per-tree hard predictions."""
        X = self._check(X)
        return np.stack([t.predict(X) for t in self.trees])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        votes = self.tree_votes(X)
        counts = np.stack([np.bincount(votes[:, i], minlength=self.n_classes)
                           for i in range(votes.shape[1])])
        return counts / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def oob_masks(self) -> np.ndarray:
        return np.stack([c == 0 for c in self.bootstrap_counts])

    def to_dict(self) -> dict:
        return {
            "format": "latsys-forest",
            "version": FOREST_FORMAT_VERSION,
            "params": asdict(self.params),
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
            "bootstrap_counts": [c.tolist() for c in self.bootstrap_counts],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Forest":
        if data.get("format") != "latsys-forest":
            raise InputDomainError("not a serialized forest")
        if data.get("version") != FOREST_FORMAT_VERSION:
            raise InputDomainError(f"unsupported forest version {data.get('version')}")
        n_classes = data["n_classes"]
        return cls(params=ForestParams(**data["params"]), n_classes=n_classes,
                   n_features=data["n_features"],
                   trees=[DecisionTree.from_dict(t, n_classes) for t in data["trees"]],
                   bootstrap_counts=[np.asarray(c, dtype=np.int64)
                                     for c in data["bootstrap_counts"]])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Forest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    # depends only on (seed, index), so trees can be grown in any order
    return np.random.default_rng([seed, tree_index])


def fit(X, y, params: ForestParams = ForestParams(), *,
        n_classes: Optional[int] = None, debug: bool = False) -> Forest:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputDomainError("training data must be a non-empty 2-D array")
    if y.shape != (X.shape[0],):
        raise InputDomainError("X and y have different lengths")
    if not np.all(np.isfinite(X)):
        raise InputDomainError("training features must be finite")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise InputDomainError("labels must be non-negative")
    n_classes = int(n_classes or y.max() + 1)
    n = y.size
    trees, boots = [], []
    for t in range(params.n_trees):
        rng = tree_rng(params.seed, t)
        sample = rng.integers(0, n, size=n)
        trees.append(grow_tree(X[sample], y[sample], n_classes, params, rng,
                               debug=debug))
        boots.append(np.bincount(sample, minlength=n))
    return Forest(params, n_classes, X.shape[1], trees, boots)


def predict_proba(forest: Forest, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    probs = forest.predict_proba(x)
    return probs[0] if x.ndim == 1 else probs


@dataclass(frozen=True)
class OOBResult:
    score: float
    n_scored: int
    n_excluded: int


def oob_score(forest: Forest, X, y) -> OOBResult:
    """Accuracy of out-of-bag majority votes over rows with an OOB tree."""
    X = forest._check(X)
    y = np.asarray(y, dtype=np.int64)
    votes = forest.tree_votes(X)
    oob = forest.oob_masks()
    if oob.shape[1] != y.size:
        raise InputDomainError("forest was trained on a different number of rows")
    correct = scored = 0
    for i in range(y.size):
        trees = np.nonzero(oob[:, i])[0]
        if trees.size == 0:
            continue
        counts = np.bincount(votes[trees, i], minlength=forest.n_classes)
        scored += 1
        correct += int(np.argmax(counts) == y[i])
    score = correct / scored if scored else 0.0
    return OOBResult(score=score, n_scored=scored, n_excluded=y.size - scored)
