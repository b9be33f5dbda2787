"""Three-layer super learner: training, inference, and persistence.

Layer composition: random forest + logistic regression (base), decision
tree + MLP (intermediate), MLP (meta). Each layer consumes the previous
layer's concatenated class-probability outputs, so inter-layer features
are 4-dim (2 learners x 2 probabilities) and the full chain is
15 -> 4 -> 4 -> 2.

Training builds each layer's input from out-of-fold predictions under a
stratified k-fold plan (k=2 base->intermediate, k=3 intermediate->meta),
then refits every learner on its layer's full input for inference use.
All randomness derives from one master seed through a documented hash
scheme, so training is reproducible bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ModelFormatError, TrainingError
from .flowdata import (
    NUM_FEATURES,
    Dataset,
    Encoder,
    FeatureVector,
    FlowRecord,
    encode,
    stratified_kfold,
)
from .learners import (
    DecisionTreeClassifier,
    LogisticRegression,
    MlpClassifier,
    RandomForestClassifier,
)

MODEL_FORMAT_VERSION = 1

# Column order of stacked features is part of the model contract: swapping
# learners within a layer changes the meaning of downstream weights.
BASE_LEARNER_ORDER = ("random_forest", "logistic_regression")
INTERMEDIATE_LEARNER_ORDER = ("decision_tree", "mlp")


def derive_seed(master: int, *parts: str) -> int:
    """Stable child seed: sha256 over the master seed and a path of tags."""
    text = f"{master}:" + "/".join(parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 40
    max_depth: int | None = None
    min_samples_leaf: int = 1
    features_per_split: int | str | None = "sqrt"
    bootstrap: bool = True


@dataclass(frozen=True)
class LogRegParams:
    learning_rate: float = 0.1
    epochs: int = 300


@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = None
    min_samples_leaf: int = 1


@dataclass(frozen=True)
class MlpParams:
    hidden_sizes: tuple[int, ...] = (5, 5)
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))


@dataclass(frozen=True)
class StackConfig:
    forest: ForestParams = field(default_factory=ForestParams)
    logreg: LogRegParams = field(default_factory=LogRegParams)
    tree: TreeParams = field(default_factory=TreeParams)
    intermediate_mlp: MlpParams = field(default_factory=MlpParams)
    meta_mlp: MlpParams = field(default_factory=lambda: MlpParams(hidden_sizes=(12, 12)))
    k_base: int = 2
    k_intermediate: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.k_base < 2 or self.k_intermediate < 2:
            raise DataError("fold counts must be >= 2")

    def with_n_trees(self, n_trees: int) -> "StackConfig":
        return dataclasses.replace(self, forest=dataclasses.replace(self.forest, n_trees=n_trees))

    def with_intermediate_hidden(self, hidden: tuple[int, ...]) -> "StackConfig":
        return dataclasses.replace(
            self, intermediate_mlp=dataclasses.replace(self.intermediate_mlp, hidden_sizes=tuple(hidden))
        )

    def with_meta_hidden(self, hidden: tuple[int, ...]) -> "StackConfig":
        return dataclasses.replace(
            self, meta_mlp=dataclasses.replace(self.meta_mlp, hidden_sizes=tuple(hidden))
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["intermediate_mlp"]["hidden_sizes"] = list(self.intermediate_mlp.hidden_sizes)
        d["meta_mlp"]["hidden_sizes"] = list(self.meta_mlp.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StackConfig":
        return cls(
            forest=ForestParams(**d["forest"]),
            logreg=LogRegParams(**d["logreg"]),
            tree=TreeParams(**d["tree"]),
            intermediate_mlp=MlpParams(**{**d["intermediate_mlp"],
                                          "hidden_sizes": tuple(d["intermediate_mlp"]["hidden_sizes"])}),
            meta_mlp=MlpParams(**{**d["meta_mlp"],
                                  "hidden_sizes": tuple(d["meta_mlp"]["hidden_sizes"])}),
            k_base=d["k_base"],
            k_intermediate=d["k_intermediate"],
            seed=d["seed"],
        )


@dataclass
class StackedFeatures:
    """Out-of-fold probability matrix, row-aligned with the training data.

    fold_of_row[i] names the fold whose held-out model produced row i, so
    leakage (a row predicted by a model that saw it) is checkable.
    """

    matrix: np.ndarray
    fold_of_row: np.ndarray
    k: int


@dataclass
class TrainingTrace:
    """Training-time artifacts kept for inspection; never serialized."""

    base: StackedFeatures
    intermediate: StackedFeatures


class SuperLearnerModel:
    """Finalized three-layer stack plus the feature encoder."""

    def __init__(self, encoder: Encoder, forest: RandomForestClassifier,
                 logreg: LogisticRegression, tree: DecisionTreeClassifier,
                 mlp_mid: MlpClassifier, mlp_meta: MlpClassifier,
                 config: StackConfig, data_hash: str = "", finalized: bool = False,
                 trace: TrainingTrace | None = None):
        self.encoder = encoder
        self.forest = forest
        self.logreg = logreg
        self.tree = tree
        self.mlp_mid = mlp_mid
        self.mlp_meta = mlp_meta
        self.config = config
        self.data_hash = data_hash
        self.finalized = finalized
        self.trace = trace

    @property
    def layer_dims(self) -> tuple[int, int, int, int]:
        """(input, base-out, intermediate-out, meta-out) widths."""
        return (NUM_FEATURES, 2 * len(BASE_LEARNER_ORDER), 2 * len(INTERMEDIATE_LEARNER_ORDER), 2)

    @property
    def n_parameters(self) -> int:
        return (self.forest.n_parameters + self.logreg.n_parameters
                + self.tree.n_parameters + self.mlp_mid.n_parameters
                + self.mlp_meta.n_parameters)

    def predict_proba(self, inputs) -> np.ndarray:
        """Probability pairs for encoded vectors, FeatureVectors, or FlowRecords.

        The score used for ROC sweeps is column 1 (probability of class 1).
        """
        if not self.finalized:
            raise ValueError("model is not finalized; train or load one first")
        if isinstance(inputs, FlowRecord):
            X = encode(inputs, self.encoder).values[None, :]
        elif isinstance(inputs, FeatureVector):
            X = inputs.values[None, :]
        elif isinstance(inputs, list) and inputs and isinstance(inputs[0], FlowRecord):
            X = np.stack([encode(r, self.encoder).values for r in inputs])
        else:
            X = np.asarray(inputs, dtype=np.float64)
            if X.ndim == 1:
                X = X[None, :]
        z1 = layer_transform((self.forest, self.logreg), X)
        z2 = layer_transform((self.tree, self.mlp_mid), z1)
        return self.mlp_meta.predict_proba(z2)

    def predict(self, inputs) -> np.ndarray:
        """Class indices by argmax; exact ties resolve to class 0."""
        p = self.predict_proba(inputs)
        return (p[:, 1] > p[:, 0]).astype(np.int64)


def layer_transform(learners, X: np.ndarray) -> np.ndarray:
    """Concatenate each learner's [p0, p1] in the fixed learner order."""
    outputs = [learner.predict_proba(X) for learner in learners]
    return np.hstack(outputs)


def _fit_base(config: StackConfig, X, y, tag: str):
    rf = RandomForestClassifier(
        n_trees=config.forest.n_trees, max_depth=config.forest.max_depth,
        min_samples_leaf=config.forest.min_samples_leaf,
        features_per_split=config.forest.features_per_split,
        bootstrap=config.forest.bootstrap,
        seed=derive_seed(config.seed, "base", "random_forest", tag),
    )
    lr = LogisticRegression(learning_rate=config.logreg.learning_rate, epochs=config.logreg.epochs)
    try:
        rf.fit(X, y)
    except Exception as exc:
        raise TrainingError(f"base/random_forest {tag}: {exc}") from exc
    try:
        lr.fit(X, y)
    except Exception as exc:
        raise TrainingError(f"base/logistic_regression {tag}: {exc}") from exc
    return rf, lr


def _fit_intermediate(config: StackConfig, S1, y, tag: str):
    dt = DecisionTreeClassifier(max_depth=config.tree.max_depth,
                                min_samples_leaf=config.tree.min_samples_leaf)
    mlp = MlpClassifier(
        hidden_sizes=config.intermediate_mlp.hidden_sizes,
        learning_rate=config.intermediate_mlp.learning_rate,
        epochs=config.intermediate_mlp.epochs,
        batch_size=config.intermediate_mlp.batch_size,
        seed=derive_seed(config.seed, "intermediate", "mlp", tag),
    )
    try:
        dt.fit(S1, y)
    except Exception as exc:
        raise TrainingError(f"intermediate/decision_tree {tag}: {exc}") from exc
    try:
        mlp.fit(S1, y)
    except Exception as exc:
        raise TrainingError(f"intermediate/mlp {tag}: {exc}") from exc
    return dt, mlp


def train_super_learner(data: Dataset, config: StackConfig,
                        encoder: Encoder | None = None,
                        data_hash: str = "") -> SuperLearnerModel:
    """Train the full stack with out-of-fold probability stacking.

    Per layer: split the layer input with a stratified k-fold plan, train
    the layer's learners on each fold complement, and predict the held-out
    fold, yielding a stacked matrix covering every row exactly once. The
    meta MLP trains on the last stacked matrix; afterwards every layer's
    learners are refit on their full layer input for inference.
    """
    n0, n1 = data.class_counts()
    need = max(config.k_base, config.k_intermediate)
    if min(n0, n1) < need:
        raise DataError(f"each class needs at least {need} examples, got {n0}/{n1}")

    X, y = data.X, data.y
    n = len(data)

    # base layer -> S1
    plan1 = stratified_kfold(data, config.k_base, derive_seed(config.seed, "base", "folds"))
    S1 = np.zeros((n, 4), dtype=np.float64)
    for fold, train_idx, held_idx in plan1.iter_folds():
        rf, lr = _fit_base(config, X[train_idx], y[train_idx], f"fold{fold}")
        S1[held_idx] = layer_transform((rf, lr), X[held_idx])
    base_feats = StackedFeatures(S1, plan1.assignments.copy(), config.k_base)

    # intermediate layer -> S2
    plan2 = stratified_kfold(data, config.k_intermediate,
                             derive_seed(config.seed, "intermediate", "folds"))
    S2 = np.zeros((n, 4), dtype=np.float64)
    for fold, train_idx, held_idx in plan2.iter_folds():
        dt, mlp = _fit_intermediate(config, S1[train_idx], y[train_idx], f"fold{fold}")
        S2[held_idx] = layer_transform((dt, mlp), S1[held_idx])
    mid_feats = StackedFeatures(S2, plan2.assignments.copy(), config.k_intermediate)

    # meta learner on S2
    meta = MlpClassifier(
        hidden_sizes=config.meta_mlp.hidden_sizes,
        learning_rate=config.meta_mlp.learning_rate,
        epochs=config.meta_mlp.epochs,
        batch_size=config.meta_mlp.batch_size,
        seed=derive_seed(config.seed, "meta", "mlp", "full"),
    )
    try:
        meta.fit(S2, y)
    except Exception as exc:
        raise TrainingError(f"meta/mlp full: {exc}") from exc

    # refit every non-meta learner on its full layer input for inference
    rf_full, lr_full = _fit_base(config, X, y, "full")
    dt_full, mlp_full = _fit_intermediate(config, S1, y, "full")

    return SuperLearnerModel(
        encoder=encoder if encoder is not None else Encoder.empty(),
        forest=rf_full, logreg=lr_full, tree=dt_full, mlp_mid=mlp_full, mlp_meta=meta,
        config=config, data_hash=data_hash, finalized=True,
        trace=TrainingTrace(base=base_feats, intermediate=mid_feats),
    )


# ---------------------------------------------------------------------------
# Persistence

def model_to_dict(model: SuperLearnerModel) -> dict:
    if not model.finalized:
        raise ValueError("only finalized models can be serialized")
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "super_learner",
        "created": "",  # deterministic output: no wall-clock stamp
        "seed": model.config.seed,
        "config": model.config.to_dict(),
        "data_hash": model.data_hash,
        "learner_order": {
            "base": list(BASE_LEARNER_ORDER),
            "intermediate": list(INTERMEDIATE_LEARNER_ORDER),
            "meta": ["mlp"],
        },
        "encoder": model.encoder.to_dict(),
        "learners": {
            "forest": model.forest.to_dict(),
            "logreg": model.logreg.to_dict(),
            "tree": model.tree.to_dict(),
            "mlp_mid": model.mlp_mid.to_dict(),
            "mlp_meta": model.mlp_meta.to_dict(),
        },
    }


def model_to_bytes(model: SuperLearnerModel) -> bytes:
    """Canonical serialization: sorted keys, no whitespace, trailing newline.

    Plain JSON numbers round-trip float64 exactly (shortest-repr decimals),
    so save -> load -> save is byte-stable.
    """
    return (json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def model_hash(model: SuperLearnerModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()


def save_model(model: SuperLearnerModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def model_from_dict(doc: dict) -> SuperLearnerModel:
    if not isinstance(doc, dict):
        raise ModelFormatError(f"model document must be an object, found {type(doc).__name__}")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"expected format_version {MODEL_FORMAT_VERSION}, found {version!r}")
    try:
        learners = doc["learners"]
        model = SuperLearnerModel(
            encoder=Encoder.from_dict(doc["encoder"]),
            forest=RandomForestClassifier.from_dict(learners["forest"]),
            logreg=LogisticRegression.from_dict(learners["logreg"]),
            tree=DecisionTreeClassifier.from_dict(learners["tree"]),
            mlp_mid=MlpClassifier.from_dict(learners["mlp_mid"]),
            mlp_meta=MlpClassifier.from_dict(learners["mlp_meta"]),
            config=StackConfig.from_dict(doc["config"]),
            data_hash=doc.get("data_hash", ""),
            finalized=True,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupted model document: {exc!r}") from exc
    return model


def load_model(path) -> SuperLearnerModel:
    try:
        with open(path, "rb") as fh:
            doc = json.loads(fh.read().decode("utf-8"))
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"model file {path} is not valid JSON: {exc}") from exc
    return model_from_dict(doc)
