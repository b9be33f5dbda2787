"""Evaluation harness: confusion rates, ROC/AUC, timing, size accounting.

Classification threshold is 0.5 (consistent with argmax on a 2-simplex).
ROC sweeps group tied scores into one step and integrate trapezoidally,
which makes the AUC equal the pairwise Mann-Whitney statistic with half
credit for ties. Undefined rates (no positives / no negatives) are
reported as None, never as 0.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    @property
    def tpr(self) -> float | None:
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def fpr(self) -> float | None:
        neg = self.fp + self.tn
        return self.fp / neg if neg else None


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Counts at a threshold; predicted positive iff score > threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1 or len(scores) == 0:
        raise DataError("scores and labels must be equal-length non-empty 1-D arrays")
    pred = scores > threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


@dataclass(frozen=True)
class RocCurve:
    """Threshold-sweep points, monotone in both coordinates, ending at (1,1)."""

    points: np.ndarray  # (m, 2) of (fpr, tpr)
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve over distinct score thresholds plus trapezoidal AUC."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both classes present")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # one step per distinct score: indices where a score group ends
    ends = np.flatnonzero(np.diff(s) != 0.0)
    ends = np.append(ends, len(s) - 1)
    cum_tp = np.cumsum(y == 1)[ends]
    cum_fp = np.cumsum(y == 0)[ends]
    tpr = np.concatenate(([0.0], cum_tp / n_pos))
    fpr = np.concatenate(([0.0], cum_fp / n_neg))
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(points=np.column_stack((fpr, tpr)), auc=auc)


@dataclass(frozen=True)
class InferenceTiming:
    total_s: float      # best-of-N wall clock for one full pass
    per_example_s: float
    repetitions: int
    n_examples: int


def time_inference(predict_fn, X, repetitions: int = 3) -> InferenceTiming:
    """Best-of-N timing of full prediction passes to damp scheduler noise."""
    if repetitions < 1:
        raise DataError("repetitions must be >= 1")
    X = np.asarray(X)
    if len(X) == 0:
        raise DataError("dataset must be non-empty")
    best = np.inf
    for _ in range(repetitions):
        start = time.perf_counter()
        predict_fn(X)
        best = min(best, time.perf_counter() - start)
    return InferenceTiming(total_s=best, per_example_s=best / len(X),
                           repetitions=repetitions, n_examples=len(X))


@dataclass(frozen=True)
class ModelSize:
    parameter_count: int
    serialized_bytes: int


def model_size(model) -> ModelSize:
    """Parameter count plus canonical model-file length in bytes."""
    from .stacker import model_to_bytes  # local import avoids a cycle

    return ModelSize(parameter_count=model.n_parameters,
                     serialized_bytes=len(model_to_bytes(model)))


@dataclass
class EvalReport:
    """The evaluation table: rates in percent, AUC, timing, size."""

    accuracy_pct: float
    tpr_pct: float | None
    fpr_pct: float | None
    auc: float
    duration_total_s: float
    duration_per_example_s: float
    parameter_count: int
    serialized_bytes: int
    n_examples: int
    threshold: float = 0.5
    config: dict | None = None
    input_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "accuracy_pct": self.accuracy_pct,
            "tpr_pct": self.tpr_pct,
            "fpr_pct": self.fpr_pct,
            "auc": self.auc,
            "duration_total_s": self.duration_total_s,
            "duration_per_example_s": self.duration_per_example_s,
            "parameter_count": self.parameter_count,
            "serialized_bytes": self.serialized_bytes,
            "n_examples": self.n_examples,
            "threshold": self.threshold,
            "config": self.config,
            "input_hash": self.input_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        def pct(v):
            return "undefined" if v is None else f"{v:.2f}"

        rows = [
            ("Examples", str(self.n_examples)),
            ("Accuracy (%)", pct(self.accuracy_pct)),
            ("TPR (%)", pct(self.tpr_pct)),
            ("FPR (%)", pct(self.fpr_pct)),
            ("ROC AUC", f"{self.auc:.4f}"),
            ("Inference total (s)", f"{self.duration_total_s:.4f}"),
            ("Inference per example (s)", f"{self.duration_per_example_s:.3e}"),
            ("Parameters", str(self.parameter_count)),
            ("Model file bytes", str(self.serialized_bytes)),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def evaluate_model(model, data, repetitions: int = 3, threshold: float = 0.5,
                   input_hash: str = "") -> EvalReport:
    """Evaluate a finalized super learner on an encoded dataset."""
    proba = model.predict_proba(data.X)
    scores = proba[:, 1]
    cm = confusion(scores, data.y, threshold)
    curve = roc_auc(scores, data.y)
    timing = time_inference(model.predict_proba, data.X, repetitions)
    size = model_size(model)
    return EvalReport(
        accuracy_pct=100.0 * cm.accuracy,
        tpr_pct=None if cm.tpr is None else 100.0 * cm.tpr,
        fpr_pct=None if cm.fpr is None else 100.0 * cm.fpr,
        auc=curve.auc,
        duration_total_s=timing.total_s,
        duration_per_example_s=timing.per_example_s,
        parameter_count=size.parameter_count,
        serialized_bytes=size.serialized_bytes,
        n_examples=len(data),
        threshold=threshold,
        config=model.config.to_dict(),
        input_hash=input_hash,
    )


def accuracy_pct(model, data, threshold: float = 0.5) -> float:
    """Validation accuracy in percent; the reduction loop's gate metric."""
    scores = model.predict_proba(data.X)[:, 1]
    return 100.0 * confusion(scores, data.y, threshold).accuracy
