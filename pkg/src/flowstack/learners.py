"""From-scratch weak learners with probability outputs.

Four binary classifiers: CART decision tree (Gini), bootstrap random
forest, full-batch logistic regression, and a small relu/softmax MLP.
Every learner exposes predict_proba returning rows on the 2-simplex.

Two non-obvious constraints shape the prediction code:

* Dot products accumulate strictly in input-index order, starting from
  the bias. The emitted C code uses the same order, which keeps reference
  and generated predictions bit-identical instead of merely close.
* Hidden activations are relu (f(0) = 0), which is what makes dead-node
  removal in the optimizer exactly output-preserving.

Training arithmetic (BLAS matmuls, vectorized scans) has no such
constraint; only the finalized prediction path is pinned.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, TrainingError


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1:
        raise DataError("y must be 1-D")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be binary {0, 1}")
    return y


def affine_ordered(W: np.ndarray, b: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Z[i, v] = b[v] + sum_u W[v, u] * A[i, u], accumulated in ascending u.

    The loop over the input index pins the floating-point evaluation order
    to match the emitted C inner loop exactly.
    """
    Z = np.repeat(b[None, :], A.shape[0], axis=0)
    for u in range(A.shape[1]):
        Z += A[:, u : u + 1] * W[None, :, u]
    return Z


def softmax2(Z: np.ndarray) -> np.ndarray:
    """Row-wise 2-way softmax, computed exactly as the emitted code does."""
    m = np.maximum(Z[:, 0], Z[:, 1])
    e0 = np.exp(Z[:, 0] - m)
    e1 = np.exp(Z[:, 1] - m)
    s = e0 + e1
    return np.column_stack((e0 / s, e1 / s))


def _standardize_fit(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean/std; zero-variance features are left untouched (mu=0, sigma=1)."""
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    flat = sigma == 0.0
    mu = np.where(flat, 0.0, mu)
    sigma = np.where(flat, 1.0, sigma)
    return mu, sigma


# ---------------------------------------------------------------------------
# Decision tree

_LEAF = -1


class DecisionTreeClassifier:
    """CART with Gini impurity, stored as flat node arrays.

    Split rule is strict `x[feature] < threshold` -> left. Ties between
    candidate splits break toward the lowest feature index, then the
    lowest threshold, so training is deterministic across runs.
    """

    def __init__(self, max_depth: int | None = None, min_samples_leaf: int = 1,
                 features_per_split: int | None = None):
        if min_samples_leaf < 1:
            raise DataError("min_samples_leaf must be >= 1")
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.features_per_split = features_per_split
        self.n_features: int | None = None
        # parallel node arrays; feature == -1 marks a leaf
        self.feature = np.empty(0, dtype=np.int32)
        self.threshold = np.empty(0, dtype=np.float64)
        self.left = np.empty(0, dtype=np.int32)
        self.right = np.empty(0, dtype=np.int32)
        self.counts = np.empty((0, 2), dtype=np.float64)

    # -- training ----------------------------------------------------------

    def fit(self, X, y, rng: np.random.Generator | None = None) -> "DecisionTreeClassifier":
        X = _as_matrix(X)
        y = _check_labels(y)
        if len(X) == 0:
            raise DataError("cannot train a tree on empty data")
        if len(X) != len(y):
            raise DataError("X and y length mismatch")
        self.n_features = X.shape[1]

        feature, threshold, left, right, counts = [], [], [], [], []

        def new_node() -> int:
            feature.append(_LEAF)
            threshold.append(0.0)
            left.append(_LEAF)
            right.append(_LEAF)
            counts.append((0.0, 0.0))
            return len(feature) - 1

        root = new_node()
        stack = [(root, np.arange(len(X)), 0)]
        while stack:
            node, idx, depth = stack.pop()
            sub_y = y[idx]
            n1 = int(sub_y.sum())
            counts[node] = (float(len(idx) - n1), float(n1))
            if (
                n1 == 0
                or n1 == len(idx)
                or len(idx) < 2 * self.min_samples_leaf
                or len(idx) < 2
                or (self.max_depth is not None and depth >= self.max_depth)
            ):
                continue
            split = self._best_split(X[idx], sub_y, rng)
            if split is None:
                continue
            feat, thr = split
            feature[node] = feat
            threshold[node] = thr
            go_left = X[idx, feat] < thr
            left_id = new_node()
            right_id = new_node()
            left[node] = left_id
            right[node] = right_id
            # push right first so the left subtree is materialized first
            stack.append((right_id, idx[~go_left], depth + 1))
            stack.append((left_id, idx[go_left], depth + 1))

        self.feature = np.array(feature, dtype=np.int32)
        self.threshold = np.array(threshold, dtype=np.float64)
        self.left = np.array(left, dtype=np.int32)
        self.right = np.array(right, dtype=np.int32)
        self.counts = np.array(counts, dtype=np.float64)
        return self

    def _best_split(self, X: np.ndarray, y: np.ndarray,
                    rng: np.random.Generator | None) -> tuple[int, float] | None:
        n, d = X.shape
        if self.features_per_split is not None and self.features_per_split < d:
            if rng is None:
                raise DataError("features_per_split requires an rng")
            cand = np.sort(rng.choice(d, size=self.features_per_split, replace=False))
        else:
            cand = np.arange(d)

        n1_total = float(y.sum())
        parent_gini = 1.0 - ((n1_total / n) ** 2 + ((n - n1_total) / n) ** 2)
        best_gain = 0.0
        best: tuple[int, float] | None = None
        msl = self.min_samples_leaf
        for f in cand:
            order = np.argsort(X[:, f], kind="stable")
            xs = X[order, f]
            ys = y[order]
            cum1 = np.cumsum(ys, dtype=np.float64)
            # candidate boundaries sit between distinct consecutive values
            boundary = np.flatnonzero(xs[:-1] < xs[1:])
            if len(boundary) == 0:
                continue
            n_left = boundary + 1.0
            n_right = n - n_left
            ok = (n_left >= msl) & (n_right >= msl)
            if not np.any(ok):
                continue
            boundary = boundary[ok]
            n_left = n_left[ok]
            n_right = n_right[ok]
            l1 = cum1[boundary]
            r1 = n1_total - l1
            gini_l = 1.0 - ((l1 / n_left) ** 2 + ((n_left - l1) / n_left) ** 2)
            gini_r = 1.0 - ((r1 / n_right) ** 2 + ((n_right - r1) / n_right) ** 2)
            gain = parent_gini - (n_left * gini_l + n_right * gini_r) / n
            pick = int(np.argmax(gain))
            if gain[pick] > best_gain:
                thr = 0.5 * (xs[boundary[pick]] + xs[boundary[pick] + 1])
                if thr > xs[boundary[pick]]:  # guard against midpoint rounding down
                    best_gain = float(gain[pick])
                    best = (int(f), float(thr))
        return best

    # -- prediction --------------------------------------------------------

    def _leaf_ids(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            internal = self.feature[node] != _LEAF
            if not np.any(internal):
                return node
            sub = np.flatnonzero(internal)
            cur = node[sub]
            go_left = X[sub, self.feature[cur]] < self.threshold[cur]
            node[sub] = np.where(go_left, self.left[cur], self.right[cur])

    def predict_proba(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {X.shape[1]}")
        leaf = self._leaf_ids(X)
        c = self.counts[leaf]
        total = c[:, 0] + c[:, 1]
        return np.column_stack((c[:, 0] / total, c[:, 1] / total))

    # -- structure ---------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        out = 0
        for i in range(self.n_nodes):  # parents precede children
            if self.feature[i] != _LEAF:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
            else:
                out = max(out, int(depths[i]))
        return out

    @property
    def n_parameters(self) -> int:
        # internal node: feature, threshold, left, right; leaf: two counts
        internal = int(np.sum(self.feature != _LEAF))
        return 4 * internal + 2 * (self.n_nodes - internal)

    def structural_bytes(self) -> bytes:
        """Canonical byte string: equal iff the trees are structurally identical."""
        return b"".join(
            (
                np.int64(self.n_features if self.n_features is not None else -1).tobytes(),
                self.feature.tobytes(),
                self.threshold.tobytes(),
                self.left.tobytes(),
                self.right.tobytes(),
                self.counts.tobytes(),
            )
        )

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "min_samples_leaf": self.min_samples_leaf,
            "features_per_split": self.features_per_split,
            "n_features": self.n_features,
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTreeClassifier":
        tree = cls(max_depth=d["max_depth"], min_samples_leaf=d["min_samples_leaf"],
                   features_per_split=d["features_per_split"])
        tree.n_features = d["n_features"]
        tree.feature = np.array(d["feature"], dtype=np.int32)
        tree.threshold = np.array(d["threshold"], dtype=np.float64)
        tree.left = np.array(d["left"], dtype=np.int32)
        tree.right = np.array(d["right"], dtype=np.int32)
        tree.counts = np.array(d["counts"], dtype=np.float64).reshape(-1, 2)
        return tree


# ---------------------------------------------------------------------------
# Random forest

class RandomForestClassifier:
    """Bagged CART trees with per-split feature subsampling.

    Per-tree RNGs are spawned deterministically from the master seed, so
    the trained forest is bit-identical across runs and independent of any
    scheduling. Forest probability is the arithmetic mean over trees,
    accumulated in tree order.
    """

    def __init__(self, n_trees: int = 40, max_depth: int | None = None,
                 min_samples_leaf: int = 1, features_per_split: int | str | None = "sqrt",
                 bootstrap: bool = True, seed: int = 0):
        if n_trees < 1:
            raise DataError("n_trees must be >= 1")
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.features_per_split = features_per_split
        self.bootstrap = bootstrap
        self.seed = seed
        self.trees: list[DecisionTreeClassifier] = []
        self.n_features: int | None = None

    def _resolve_fps(self, d: int) -> int | None:
        if self.features_per_split == "sqrt":
            return max(1, int(np.sqrt(d)))
        return self.features_per_split

    def fit(self, X, y) -> "RandomForestClassifier":
        X = _as_matrix(X)
        y = _check_labels(y)
        self.n_features = X.shape[1]
        fps = self._resolve_fps(X.shape[1])
        self.trees = []
        children = np.random.SeedSequence(self.seed).spawn(self.n_trees)
        for t in range(self.n_trees):
            rng = np.random.default_rng(children[t])
            if self.bootstrap:
                idx = rng.integers(0, len(X), len(X))
                Xb, yb = X[idx], y[idx]
            else:
                Xb, yb = X, y
            tree = DecisionTreeClassifier(max_depth=self.max_depth,
                                          min_samples_leaf=self.min_samples_leaf,
                                          features_per_split=fps)
            tree.fit(Xb, yb, rng=rng)
            self.trees.append(tree)
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {X.shape[1]}")
        acc = np.zeros((len(X), 2), dtype=np.float64)
        for tree in self.trees:
            acc += tree.predict_proba(X)
        return acc / float(self.n_trees)

    @property
    def n_parameters(self) -> int:
        return sum(t.n_parameters for t in self.trees)

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_samples_leaf": self.min_samples_leaf,
            "features_per_split": self.features_per_split,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForestClassifier":
        forest = cls(n_trees=d["n_trees"], max_depth=d["max_depth"],
                     min_samples_leaf=d["min_samples_leaf"],
                     features_per_split=d["features_per_split"],
                     bootstrap=d["bootstrap"], seed=d["seed"])
        forest.n_features = d["n_features"]
        forest.trees = [DecisionTreeClassifier.from_dict(td) for td in d["trees"]]
        return forest


# ---------------------------------------------------------------------------
# Logistic regression

class LogisticRegression:
    """Full-batch gradient descent on log loss.

    Features are standardized internally for training; the scale/shift is
    folded into the stored weights afterwards, so prediction (and emitted
    code) consumes raw feature values. The step size is halved whenever a
    step would increase the loss, which keeps the training loss monotone
    non-increasing.
    """

    def __init__(self, learning_rate: float = 0.1, epochs: int = 300):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.weights = np.empty(0, dtype=np.float64)
        self.bias = 0.0
        self.n_features: int | None = None
        self.loss_history: list[float] = []

    @staticmethod
    def _loss(Z: np.ndarray, y: np.ndarray) -> float:
        # mean log loss, stable for large |z|
        sign = 2.0 * y - 1.0
        return float(np.mean(np.logaddexp(0.0, -sign * Z)))

    def fit(self, X, y) -> "LogisticRegression":
        X = _as_matrix(X)
        y = _check_labels(y)
        if len(np.unique(y)) < 2:
            raise DataError("both classes must be present")
        self.n_features = X.shape[1]
        mu, sigma = _standardize_fit(X)
        Xs = (X - mu) / sigma
        yf = y.astype(np.float64)

        w = np.zeros(X.shape[1], dtype=np.float64)
        b = 0.0
        lr = self.learning_rate
        loss = self._loss(Xs @ w + b, yf)
        self.loss_history = [loss]
        for _ in range(self.epochs):
            with np.errstate(over="ignore"):
                p = 1.0 / (1.0 + np.exp(-(Xs @ w + b)))
            err = p - yf
            gw = Xs.T @ err / len(y)
            gb = float(err.mean())
            while True:
                w_new = w - lr * gw
                b_new = b - lr * gb
                loss_new = self._loss(Xs @ w_new + b_new, yf)
                if loss_new <= loss or lr <= 1e-12:
                    break
                lr *= 0.5
            if loss_new > loss:
                break  # cannot improve at any usable step size
            w, b, loss = w_new, b_new, loss_new
            self.loss_history.append(loss)

        self.weights = w / sigma
        self.bias = float(b - np.sum(w * mu / sigma))
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {X.shape[1]}")
        Z = affine_ordered(self.weights[None, :], np.array([self.bias]), X)[:, 0]
        with np.errstate(over="ignore"):
            p1 = 1.0 / (1.0 + np.exp(-Z))
        return np.column_stack((1.0 - p1, p1))

    @property
    def n_parameters(self) -> int:
        return len(self.weights) + 1

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "n_features": self.n_features,
            "weights": self.weights.tolist(),
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticRegression":
        model = cls(learning_rate=d["learning_rate"], epochs=d["epochs"])
        model.n_features = d["n_features"]
        model.weights = np.array(d["weights"], dtype=np.float64)
        model.bias = float(d["bias"])
        return model


# ---------------------------------------------------------------------------
# Multi-layer perceptron

def mlp_loss_and_grads(weights: list[np.ndarray], biases: list[np.ndarray],
                       X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its gradients.

    Hidden layers are relu, output is a 2-way softmax. Shared by training
    and by the finite-difference gradient check.
    """
    acts = [X]
    A = X
    for l in range(len(weights) - 1):
        A = np.maximum(A @ weights[l].T + biases[l], 0.0)
        acts.append(A)
    Z = A @ weights[-1].T + biases[-1]
    Zs = Z - Z.max(axis=1, keepdims=True)
    expZ = np.exp(Zs)
    P = expZ / expZ.sum(axis=1, keepdims=True)
    n = len(X)
    with np.errstate(divide="ignore"):
        loss = float(-np.mean(np.log(P[np.arange(n), y])))

    gW = [np.zeros_like(w) for w in weights]
    gB = [np.zeros_like(b) for b in biases]
    delta = P.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for l in range(len(weights) - 1, -1, -1):
        gW[l] = delta.T @ acts[l]
        gB[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l]) * (acts[l] > 0.0)
    return loss, gW, gB


class MlpClassifier:
    """Small feed-forward net: relu hidden layers, 2-way softmax output.

    Trained with mini-batch SGD on cross-entropy. Inputs are standardized
    internally and the transform is folded into the first layer after
    training. relu is pinned (not configurable) because f(0) = 0 is what
    makes dead-node pruning exact.
    """

    hidden_activation = "relu"

    def __init__(self, hidden_sizes=(5, 5), learning_rate: float = 0.05,
                 epochs: int = 200, batch_size: int = 32, seed: int = 0):
        hidden_sizes = tuple(int(h) for h in hidden_sizes)
        if not hidden_sizes or any(h < 1 for h in hidden_sizes):
            raise DataError(f"hidden_sizes must be non-empty and >= 1, got {hidden_sizes}")
        self.hidden_sizes = hidden_sizes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self.n_features: int | None = None

    def fit(self, X, y) -> "MlpClassifier":
        X = _as_matrix(X)
        y = _check_labels(y)
        self.n_features = X.shape[1]
        mu, sigma = _standardize_fit(X)
        Xs = (X - mu) / sigma

        rng = np.random.default_rng(self.seed)
        dims = [X.shape[1], *self.hidden_sizes, 2]
        weights = [rng.normal(0.0, np.sqrt(2.0 / dims[l]), size=(dims[l + 1], dims[l]))
                   for l in range(len(dims) - 1)]
        biases = [np.zeros(dims[l + 1]) for l in range(len(dims) - 1)]

        n = len(X)
        bs = min(self.batch_size, n)
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            for batch_no, start in enumerate(range(0, n, bs)):
                idx = perm[start : start + bs]
                loss, gW, gB = mlp_loss_and_grads(weights, biases, Xs[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite training loss at epoch {epoch}, batch {batch_no}"
                    )
                for l in range(len(weights)):
                    weights[l] -= self.learning_rate * gW[l]
                    biases[l] -= self.learning_rate * gB[l]

        # fold standardization into the first layer
        weights[0] = weights[0] / sigma[None, :]
        biases[0] = biases[0] - weights[0] @ mu
        self.weights = weights
        self.biases = biases
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {X.shape[1]}")
        A = X
        for l in range(len(self.weights) - 1):
            A = np.maximum(affine_ordered(self.weights[l], self.biases[l], A), 0.0)
        Z = affine_ordered(self.weights[-1], self.biases[-1], A)
        return softmax2(Z)

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights)

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def to_dict(self) -> dict:
        return {
            "hidden_sizes": list(self.hidden_sizes),
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "n_features": self.n_features,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpClassifier":
        model = cls(hidden_sizes=tuple(d["hidden_sizes"]), learning_rate=d["learning_rate"],
                    epochs=d["epochs"], batch_size=d["batch_size"], seed=d["seed"])
        model.n_features = d["n_features"]
        model.weights = [np.array(w, dtype=np.float64) for w in d["weights"]]
        model.biases = [np.array(b, dtype=np.float64) for b in d["biases"]]
        return model
