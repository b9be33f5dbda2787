"""Independent reference implementations used as test oracles.

These deliberately use the slowest, most literal formulation of each
computation (exhaustive enumeration, O(n^2) pair counting, central
differences) and never share code with the library paths they check.
"""

from __future__ import annotations

import numpy as np


def gini(y: np.ndarray) -> float:
    n = len(y)
    p1 = float(np.sum(y)) / n
    return 1.0 - (p1 ** 2 + (1.0 - p1) ** 2)


class BruteForceTree:
    """Exhaustive-split CART: every feature, every midpoint, no shortcuts.

    Same split semantics as the library tree (strict < goes left, ties
    break to the lowest feature then lowest threshold) so greedy training
    should land on the same accuracy.
    """

    def __init__(self, max_depth: int | None = None, min_samples_leaf: int = 1):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.root = None

    def fit(self, X, y):
        self.root = self._build(np.asarray(X, float), np.asarray(y, int), 0)
        return self

    def _build(self, X, y, depth):
        n = len(y)
        counts = (int(np.sum(y == 0)), int(np.sum(y == 1)))
        if (
            counts[0] == 0 or counts[1] == 0 or n < 2
            or n < 2 * self.min_samples_leaf
            or (self.max_depth is not None and depth >= self.max_depth)
        ):
            return ("leaf", counts)
        parent = gini(y)
        best = None  # (gain, feature, threshold)
        for f in range(X.shape[1]):
            values = sorted(set(X[:, f].tolist()))
            for a, b in zip(values, values[1:]):
                thr = 0.5 * (a + b)
                if thr <= a:
                    continue
                left = X[:, f] < thr
                nl, nr = int(left.sum()), int((~left).sum())
                if nl < self.min_samples_leaf or nr < self.min_samples_leaf:
                    continue
                gain = parent - (nl * gini(y[left]) + nr * gini(y[~left])) / n
                if best is None or gain > best[0] + 0.0:
                    if best is None or gain > best[0]:
                        best = (gain, f, thr)
        if best is None or best[0] <= 0.0:
            return ("leaf", counts)
        _, f, thr = best
        left = X[:, f] < thr
        return ("split", f, thr,
                self._build(X[left], y[left], depth + 1),
                self._build(X[~left], y[~left], depth + 1))

    def predict(self, X):
        X = np.asarray(X, float)
        out = np.empty(len(X), dtype=int)
        for i, x in enumerate(X):
            node = self.root
            while node[0] == "split":
                _, f, thr, lo, hi = node
                node = lo if x[f] < thr else hi
            c0, c1 = node[1]
            out[i] = 1 if c1 > c0 else 0
        return out


def pairwise_auc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) with 1/2 tie credit."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def central_difference_grads(loss_fn, params: list[np.ndarray], h: float = 1e-5):
    """Central finite differences of loss_fn w.r.t. every scalar parameter."""
    grads = []
    for arr in params:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = loss_fn()
            flat[i] = keep - h
            lo = loss_fn()
            flat[i] = keep
            gf[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """|a-b| / max(1, |a|, |b|), maximized over elements."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))
