"""Evaluation metrics: balanced accuracy, weighted F1, quadratic-weighted
Cohen's kappa, and Harrell's concordance index for censored survival data."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ValidationError


def _check_classification(preds, labels, num_classes: int):
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape[0] == 0 or preds.shape[0] != labels.shape[0]:
        raise ValidationError("preds and labels must be non-empty and aligned")
    if num_classes < 1:
        raise ValidationError("num_classes must be >= 1")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    if preds.min() < 0 or preds.max() >= num_classes:
        raise ValidationError(f"preds must lie in [0, {num_classes})")
    return preds, labels


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts indexed [true, predicted]."""
    preds, labels = _check_classification(preds, labels, num_classes)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts


def balanced_accuracy(preds, labels, num_classes: int) -> float:
    """Mean per-class recall over the classes that occur in the labels."""
    cm = confusion_matrix(preds, labels, num_classes)
    support = cm.sum(axis=1)
    present = support > 0
    recalls = np.diag(cm)[present] / support[present]
    return float(recalls.mean())


def weighted_f1(preds, labels, num_classes: int) -> float:
    """Support-weighted mean of per-class F1; absent precision or recall
    contributes F1 = 0."""
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    return float((support / support.sum() * f1).sum())


def _quadratic_kappa_parts(preds, labels, num_classes: int) -> tuple[float, float]:
    if num_classes < 2:
        raise ValidationError("quadratic kappa requires num_classes >= 2")
    cm = confusion_matrix(preds, labels, num_classes).astype(np.float64)
    n = cm.sum()
    idx = np.arange(num_classes, dtype=np.float64)
    w = (idx[:, None] - idx[None, :]) ** 2 / (num_classes - 1) ** 2
    expected = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / n
    return float((w * cm).sum()), float((w * expected).sum())


def cohen_kappa_quadratic(preds, labels, num_classes: int) -> float:
    """1 - observed/expected quadratic disagreement. Degenerate inputs (every
    label and prediction in one identical class) evaluate to 0; negative
    values pass through unclamped."""
    observed, expected = _quadratic_kappa_parts(preds, labels, num_classes)
    if expected == 0.0:
        return 0.0
    return 1.0 - observed / expected


class ConcordanceResult(NamedTuple):
    cindex: float
    n_comparable_pairs: int


def concordance_index(risks, times, events) -> ConcordanceResult:
    """Fraction of comparable pairs ordered correctly by risk.

    A pair (i, j) is comparable when t_i < t_j and subject i had an event
    (pairs whose earlier time is censored are excluded). Higher risk at the
    earlier event counts 1, a risk tie counts 0.5.
    """
    risks = np.asarray(risks, dtype=np.float64).reshape(-1)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events, dtype=bool).reshape(-1)
    n = risks.shape[0]
    if n < 2 or times.shape[0] != n or events.shape[0] != n:
        raise ValidationError("need >= 2 aligned (risk, time, event) triples")
    comparable = (times[:, None] < times[None, :]) & events[:, None]
    num_pairs = int(comparable.sum())
    if num_pairs == 0:
        raise ValidationError("no comparable pairs (check censoring and ties)")
    greater = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    score = float((comparable & greater).sum()) + 0.5 * float((comparable & tied).sum())
    return ConcordanceResult(score / num_pairs, num_pairs)


@dataclass(eq=False)
class EvalReport:
    """Named metric values plus per-class detail, serializable to JSON/CSV."""

    task: str  # "classification" | "survival"
    metrics: dict[str, float]
    per_class: dict[int, dict[str, float]] | None = None
    n_comparable_pairs: int | None = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not np.isfinite(value):
                raise ValidationError(f"metric {name!r} is not finite")

    def to_json(self) -> str:
        payload = {"task": self.task, "metrics": self.metrics}
        if self.per_class is not None:
            payload["per_class"] = {str(k): v for k, v in self.per_class.items()}
        if self.n_comparable_pairs is not None:
            payload["n_comparable_pairs"] = self.n_comparable_pairs
        if self.flags:
            payload["flags"] = self.flags
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_csv_row(self) -> tuple[list[str], list[str]]:
        names = sorted(self.metrics)
        header = ["task"] + names
        row = [self.task] + ["%.9g" % self.metrics[m] for m in names]
        if self.n_comparable_pairs is not None:
            header.append("n_comparable_pairs")
            row.append(str(self.n_comparable_pairs))
        return header, row


def evaluate_classification(preds, labels, num_classes: int) -> EvalReport:
    preds_arr, labels_arr = _check_classification(preds, labels, num_classes)
    cm = confusion_matrix(preds_arr, labels_arr, num_classes)
    per_class = {}
    for c in range(num_classes):
        support = int(cm[c].sum())
        tp = int(cm[c, c])
        predicted = int(cm[:, c].sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = {"support": support, "precision": precision, "recall": recall, "f1": f1}
    metrics = {
        "balanced_accuracy": balanced_accuracy(preds_arr, labels_arr, num_classes),
        "weighted_f1": weighted_f1(preds_arr, labels_arr, num_classes),
    }
    flags = {}
    if num_classes >= 2:
        observed, expected = _quadratic_kappa_parts(preds_arr, labels_arr, num_classes)
        degenerate = expected == 0.0
        metrics["kappa_quadratic"] = 0.0 if degenerate else 1.0 - observed / expected
        flags["kappa_degenerate"] = degenerate
    return EvalReport(task="classification", metrics=metrics, per_class=per_class, flags=flags)


def evaluate_survival(risks, times, events) -> EvalReport:
    result = concordance_index(risks, times, events)
    return EvalReport(
        task="survival",
        metrics={"c_index": result.cindex},
        n_comparable_pairs=result.n_comparable_pairs,
    )
