"""Model shrinking: accuracy-gated size reduction plus exact MLP pruning.

Two mechanisms. The reduction loop retrains the whole stack at
progressively smaller sizes (fewer forest trees, then narrower hidden
layers) and keeps a candidate only while validation accuracy stays within
an absolute percentage-point gate of the previously accepted model; a
rejected candidate never replaces the stored model and ends its
dimension. Afterwards, dead hidden nodes are removed from the two MLPs
without retraining.

A hidden node is removable exactly when either all of its outgoing
weights are zero, or all of its incoming weights and its bias are zero.
With relu hidden activations (f(0) = 0) both cases contribute nothing to
any downstream sum, so removal is provably output-preserving, not merely
approximately so; removal can expose new dead nodes, hence the fixpoint
iteration. Duplicate-tree detection is provided as the diagnostic that
motivates retraining forests at a smaller size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .flowdata import Dataset
from .learners import MlpClassifier, RandomForestClassifier
from .metrics import accuracy_pct, roc_auc, time_inference
from .stacker import StackConfig, SuperLearnerModel, train_super_learner


@dataclass(frozen=True)
class ReductionSchedule:
    """Candidate sizes for the reduction loop.

    forest_sizes[0] is the baseline tree count; the rest are tried in
    order. Hidden-size candidates default to decrementing every hidden
    layer by one per step (floor 1) from the current accepted width;
    explicit candidate lists override that rule. The gate is an absolute
    accuracy tolerance in percentage points.
    """

    forest_sizes: tuple[int, ...] = (40, 30, 20, 10)
    intermediate_hidden: tuple[tuple[int, ...], ...] | None = None
    meta_hidden: tuple[tuple[int, ...], ...] | None = None
    gate: float = 0.5

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.forest_sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise DataError("forest_sizes must be non-empty with all sizes >= 1")
        if any(a <= b for a, b in zip(sizes, sizes[1:])):
            raise DataError(f"forest_sizes must be strictly descending, got {sizes}")
        if self.gate <= 0:
            raise DataError("gate must be > 0")
        object.__setattr__(self, "forest_sizes", sizes)
        for name in ("intermediate_hidden", "meta_hidden"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(tuple(int(h) for h in c) for c in value))


def _decrement_candidates(hidden: tuple[int, ...]) -> list[tuple[int, ...]]:
    out = []
    current = hidden
    while True:
        smaller = tuple(max(1, h - 1) for h in current)
        if smaller == current:
            return out
        out.append(smaller)
        current = smaller


@dataclass
class ReductionStep:
    dimension: str
    label: str
    n_trees: int
    intermediate_hidden: tuple[int, ...]
    meta_hidden: tuple[int, ...]
    accuracy_pct: float
    accepted: bool
    reason: str
    stack_auc: float | None = None
    rf_accuracy_pct: float | None = None
    rf_auc: float | None = None
    duration_s: float | None = None

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "label": self.label,
            "n_trees": self.n_trees,
            "intermediate_hidden": list(self.intermediate_hidden),
            "meta_hidden": list(self.meta_hidden),
            "accuracy_pct": self.accuracy_pct,
            "accepted": self.accepted,
            "reason": self.reason,
            "stack_auc": self.stack_auc,
            "rf_accuracy_pct": self.rf_accuracy_pct,
            "rf_auc": self.rf_auc,
            "duration_s": self.duration_s,
        }


@dataclass
class ReductionReport:
    """Trace of the reduction loop: every candidate, its score, the verdict."""

    gate: float
    baseline_accuracy_pct: float
    steps: list[ReductionStep] = field(default_factory=list)
    dimension_outcomes: dict[str, str] = field(default_factory=dict)
    final_accuracy_pct: float = 0.0
    final_config: dict | None = None
    prune_removed: dict[str, list[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "gate": self.gate,
            "baseline_accuracy_pct": self.baseline_accuracy_pct,
            "steps": [s.to_dict() for s in self.steps],
            "dimension_outcomes": dict(self.dimension_outcomes),
            "final_accuracy_pct": self.final_accuracy_pct,
            "final_config": self.final_config,
            "prune_removed": {k: list(v) for k, v in self.prune_removed.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        header = (
            f"{'step':<26} {'trees':>5} {'mid':>8} {'meta':>8} {'dur(s)':>8} "
            f"{'RF acc%':>8} {'RF AUC':>7} {'acc%':>7} {'AUC':>7}  verdict"
        )
        lines = [header, "-" * len(header)]
        for s in self.steps:
            def fmt(v, spec):
                return "-" if v is None else format(v, spec)

            mid = "x".join(str(h) for h in s.intermediate_hidden)
            meta = "x".join(str(h) for h in s.meta_hidden)
            verdict = "accepted" if s.accepted else f"rejected ({s.reason})"
            lines.append(
                f"{s.label:<26} {s.n_trees:>5} {mid:>8} {meta:>8} "
                f"{fmt(s.duration_s, '8.3f'):>8} {fmt(s.rf_accuracy_pct, '8.2f'):>8} "
                f"{fmt(s.rf_auc, '7.4f'):>7} {s.accuracy_pct:>7.2f} "
                f"{fmt(s.stack_auc, '7.4f'):>7}  {verdict}"
            )
        lines.append(f"gate: {self.gate} points, final accuracy: {self.final_accuracy_pct:.2f}%")
        return "\n".join(lines) + "\n"


def reduce_forest(config: StackConfig, new_n_trees: int) -> StackConfig:
    """Config with the forest size replaced; the caller retrains the stack."""
    if new_n_trees < 1:
        raise DataError("new_n_trees must be >= 1")
    return config.with_n_trees(new_n_trees)


def _default_eval(model: SuperLearnerModel, valid: Dataset) -> float:
    return accuracy_pct(model, valid)


def _step_extras(model: SuperLearnerModel, valid: Dataset) -> dict:
    stack_scores = model.predict_proba(valid.X)[:, 1]
    rf_scores = model.forest.predict_proba(valid.X)[:, 1]
    rf_pred = (rf_scores > 0.5).astype(np.int64)
    timing = time_inference(model.predict_proba, valid.X, repetitions=1)
    return {
        "stack_auc": roc_auc(stack_scores, valid.y).auc,
        "rf_accuracy_pct": 100.0 * float(np.mean(rf_pred == valid.y)),
        "rf_auc": roc_auc(rf_scores, valid.y).auc,
        "duration_s": timing.total_s,
    }


def feature_reduction_loop(train: Dataset, valid: Dataset, config: StackConfig,
                           schedule: ReductionSchedule | None = None,
                           trainer=train_super_learner, eval_fn=None,
                           collect_extras: bool | None = None
                           ) -> tuple[SuperLearnerModel, ReductionReport]:
    """Run the gated reduction loop, then prune dead MLP nodes (no retrain).

    Dimensions run in order: forest sizes, intermediate MLP hidden sizes,
    meta MLP hidden sizes. Within a dimension the first rejected candidate
    restores the previously accepted model and ends that dimension; an
    exhausted schedule is normal completion. `trainer` and `eval_fn` exist
    for dependency injection in tests; defaults train the real stack and
    score validation accuracy in percent.
    """
    if schedule is None:
        schedule = ReductionSchedule()
    scoring = eval_fn if eval_fn is not None else _default_eval
    extras_on = collect_extras if collect_extras is not None else eval_fn is None

    def build_step(dimension, label, cfg, model, acc, accepted, reason) -> ReductionStep:
        extras = _step_extras(model, valid) if extras_on else {}
        return ReductionStep(
            dimension=dimension, label=label,
            n_trees=cfg.forest.n_trees,
            intermediate_hidden=cfg.intermediate_mlp.hidden_sizes,
            meta_hidden=cfg.meta_mlp.hidden_sizes,
            accuracy_pct=acc, accepted=accepted, reason=reason, **extras,
        )

    accepted_config = config.with_n_trees(schedule.forest_sizes[0])
    accepted_model = trainer(train, accepted_config)
    accepted_acc = float(scoring(accepted_model, valid))
    report = ReductionReport(gate=schedule.gate, baseline_accuracy_pct=accepted_acc)
    report.steps.append(build_step("baseline", f"baseline n_trees={accepted_config.forest.n_trees}",
                                   accepted_config, accepted_model, accepted_acc, True, "baseline"))

    def run_dimension(dimension: str, candidates, apply) -> None:
        nonlocal accepted_config, accepted_model, accepted_acc
        for cand in candidates:
            cand_config = apply(accepted_config, cand)
            model = trainer(train, cand_config)
            acc = float(scoring(model, valid))
            drop = accepted_acc - acc
            ok = drop <= schedule.gate
            label = f"{dimension}={cand}"
            reason = "within gate" if ok else f"accuracy drop {drop:.2f} > gate {schedule.gate}"
            report.steps.append(build_step(dimension, label, cand_config, model, acc, ok, reason))
            if not ok:
                report.dimension_outcomes[dimension] = "stopped on rejection"
                return
            accepted_config, accepted_model, accepted_acc = cand_config, model, acc
        report.dimension_outcomes[dimension] = "schedule exhausted"

    run_dimension("forest", schedule.forest_sizes[1:],
                  lambda cfg, n: cfg.with_n_trees(int(n)))

    mid_candidates = (schedule.intermediate_hidden if schedule.intermediate_hidden is not None
                      else _decrement_candidates(accepted_config.intermediate_mlp.hidden_sizes))
    run_dimension("intermediate_mlp", mid_candidates,
                  lambda cfg, h: cfg.with_intermediate_hidden(tuple(h)))

    meta_candidates = (schedule.meta_hidden if schedule.meta_hidden is not None
                       else _decrement_candidates(accepted_config.meta_mlp.hidden_sizes))
    run_dimension("meta_mlp", meta_candidates,
                  lambda cfg, h: cfg.with_meta_hidden(tuple(h)))

    if isinstance(accepted_model, SuperLearnerModel):
        final_model, prune_results = prune_super_learner(accepted_model)
        report.prune_removed = {name: res.removed_per_layer for name, res in prune_results.items()}
    else:  # stub trainer in tests
        final_model = accepted_model
    report.final_accuracy_pct = accepted_acc
    report.final_config = accepted_config.to_dict()
    return final_model, report


# ---------------------------------------------------------------------------
# Duplicate-tree detection

def find_duplicate_trees(forest: RandomForestClassifier) -> list[list[int]]:
    """Groups (size >= 2) of structurally identical trees, by index.

    Trees are bucketed by a canonical structural hash and then compared by
    full structural equality, so hash collisions cannot merge distinct
    trees.
    """
    import hashlib

    buckets: dict[bytes, dict[bytes, list[int]]] = {}
    for i, tree in enumerate(forest.trees):
        blob = tree.structural_bytes()
        digest = hashlib.sha256(blob).digest()
        buckets.setdefault(digest, {}).setdefault(blob, []).append(i)
    groups = [idxs for sub in buckets.values() for idxs in sub.values() if len(idxs) >= 2]
    return sorted(groups, key=lambda g: g[0])


# ---------------------------------------------------------------------------
# Dead-node pruning

@dataclass
class PruneResult:
    """Pruned MLP plus the removal audit and an equivalence certificate."""

    model: MlpClassifier
    removed_per_layer: list[int]
    iterations: int
    floored_layers: list[int]
    max_deviation: float
    n_probes: int


def _default_probes(n_features: int, rng_seed: int = 0) -> np.ndarray:
    """Probe inputs covering the corners: zeros, negatives, large magnitudes."""
    rng = np.random.default_rng(rng_seed)
    blocks = [
        rng.random((256, n_features)),
        rng.normal(0.0, 3.0, (128, n_features)),
        np.zeros((2, n_features)),
        np.full((2, n_features), 1e6),
        np.full((2, n_features), -1e6),
        -rng.random((64, n_features)),
    ]
    return np.vstack(blocks)


def _dead_hidden_mask(weights: list[np.ndarray], biases: list[np.ndarray], layer: int) -> np.ndarray:
    out_dead = np.all(weights[layer + 1] == 0.0, axis=0)
    in_dead = np.all(weights[layer] == 0.0, axis=1) & (biases[layer] == 0.0)
    return out_dead | in_dead


def prune_mlp_dead_nodes(mlp: MlpClassifier, probes: np.ndarray | None = None) -> PruneResult:
    """Remove provably inert hidden nodes and certify output equivalence.

    Requires relu hidden activations. Iterates until no layer has a
    removable node; a layer is never emptied below one node (recorded in
    floored_layers when the floor binds).
    """
    if mlp.hidden_activation != "relu":
        raise DataError("exact pruning requires relu hidden activations")
    if not mlp.weights:
        raise DataError("cannot prune an untrained MLP")

    weights = [w.copy() for w in mlp.weights]
    biases = [b.copy() for b in mlp.biases]
    n_hidden_layers = len(weights) - 1
    removed = [0] * n_hidden_layers
    floored: set[int] = set()

    total_width = sum(w.shape[0] for w in weights[:-1])
    iterations = 0
    for _ in range(total_width + 1):
        iterations += 1
        changed = False
        for layer in range(n_hidden_layers):
            dead = _dead_hidden_mask(weights, biases, layer)
            if dead.all():
                dead[int(np.argmax(dead))] = False  # keep the lowest-index node
                floored.add(layer)
            if not dead.any():
                continue
            keep = ~dead
            weights[layer] = weights[layer][keep]
            biases[layer] = biases[layer][keep]
            weights[layer + 1] = weights[layer + 1][:, keep]
            removed[layer] += int(dead.sum())
            changed = True
        if not changed:
            break

    pruned = MlpClassifier(
        hidden_sizes=tuple(w.shape[0] for w in weights[:-1]),
        learning_rate=mlp.learning_rate, epochs=mlp.epochs,
        batch_size=mlp.batch_size, seed=mlp.seed,
    )
    pruned.n_features = mlp.n_features
    pruned.weights = weights
    pruned.biases = biases

    if probes is None:
        probes = _default_probes(int(mlp.n_features))
    deviation = float(np.max(np.abs(mlp.predict_proba(probes) - pruned.predict_proba(probes))))
    return PruneResult(model=pruned, removed_per_layer=removed, iterations=iterations,
                       floored_layers=sorted(floored), max_deviation=deviation,
                       n_probes=len(probes))


def prune_super_learner(model: SuperLearnerModel) -> tuple[SuperLearnerModel, dict[str, PruneResult]]:
    """Prune both stack MLPs; every other learner is untouched.

    No retraining happens and predictions are bit-identical, which is why
    this runs after the reduction loop instead of inside it.
    """
    if not model.finalized:
        raise ValueError("model is not finalized")
    mid = prune_mlp_dead_nodes(model.mlp_mid)
    meta = prune_mlp_dead_nodes(model.mlp_meta)
    pruned = SuperLearnerModel(
        encoder=model.encoder, forest=model.forest, logreg=model.logreg,
        tree=model.tree, mlp_mid=mid.model, mlp_meta=meta.model,
        config=model.config, data_hash=model.data_hash, finalized=True,
        trace=model.trace,
    )
    return pruned, {"intermediate_mlp": mid, "meta_mlp": meta}
