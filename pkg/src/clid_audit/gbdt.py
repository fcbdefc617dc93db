"""Gradient-boosted regression trees on logistic loss (Newton leaf weights,
exact greedy splits, no subsampling)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


@dataclass
class Tree:
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def _add(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(int(feature))
        self.threshold.append(float(threshold))
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        for i, row in enumerate(X):
            node = 0
            while self.feature[node] >= 0:
                node = self.left[node] if row[self.feature[node]] <= self.threshold[node] else self.right[node]
            out[i] = self.value[node]
        return out

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(**{k: list(d[k]) for k in ("feature", "threshold", "left", "right", "value")})


@dataclass
class BoostedTrees:
    n_trees: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    reg_lambda: float = 1.0
    initial_score: float = 0.0
    trees: list = field(default_factory=list)

    def fit(self, X, y) -> "BoostedTrees":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError("X must be 2-D and aligned with y")
        if len(np.unique(y)) < 2:
            raise ValueError("training labels must contain both classes")
        p0 = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        self.initial_score = float(np.log(p0 / (1 - p0)))
        F = np.full(len(y), self.initial_score)
        order = np.argsort(X, axis=0, kind="stable")
        self.trees = []
        for _ in range(self.n_trees):
            p = expit(F)
            g, h = p - y, p * (1 - p)
            tree = Tree()
            self._grow(tree, X, order, g, h, np.ones(len(y), bool), 0)
            self.trees.append(tree)
            F += self.learning_rate * tree.predict(X)
        return self

    def _leaf_value(self, g, h):
        return -g.sum() / (h.sum() + self.reg_lambda)

    def _grow(self, tree, X, order, g, h, mask, depth) -> int:
        node = tree._add(value=self._leaf_value(g[mask], h[mask]))
        if depth >= self.max_depth or mask.sum() < 2 * self.min_leaf:
            return node
        split = self._best_split(X, order, g, h, mask)
        if split is None:
            return node
        f, thr = split
        go_left = mask & (X[:, f] <= thr)
        tree.feature[node], tree.threshold[node] = f, thr
        tree.left[node] = self._grow(tree, X, order, g, h, go_left, depth + 1)
        tree.right[node] = self._grow(tree, X, order, g, h, mask & ~go_left, depth + 1)
        return node

    def _best_split(self, X, order, g, h, mask):
        lam, m = self.reg_lambda, self.min_leaf
        G, H = g[mask].sum(), h[mask].sum()
        parent = G * G / (H + lam)
        best_gain, best = 1e-12, None
        for f in range(X.shape[1]):
            idx = order[:, f][mask[order[:, f]]]
            xs = X[idx, f]
            gl, hl = np.cumsum(g[idx])[:-1], np.cumsum(h[idx])[:-1]
            n_left = np.arange(1, len(idx))
            ok = (xs[1:] > xs[:-1]) & (n_left >= m) & (len(idx) - n_left >= m)
            if not ok.any():
                continue
            gain = gl**2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - parent
            gain = np.where(ok, gain, -np.inf)
            j = int(np.argmax(gain))
            if gain[j] > best_gain:
                best_gain = float(gain[j])
                best = (f, float((xs[j] + xs[j + 1]) / 2.0))
        return best

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        F = np.full(len(X), self.initial_score)
        for tree in self.trees:
            F += self.learning_rate * tree.predict(X)
        return F

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "min_leaf": self.min_leaf,
            "reg_lambda": self.reg_lambda,
            "initial_score": self.initial_score,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedTrees":
        d = dict(d)
        trees = [Tree.from_dict(t) for t in d.pop("trees")]
        return cls(**d, trees=trees)
