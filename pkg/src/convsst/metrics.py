"""Confusion-matrix accumulation and classification metrics."""

from __future__ import annotations

import json
import warnings

import numpy as np


class MetricsError(ValueError):
    """Raised on out-of-range classes or empty matrices."""


class ConfusionMatrix:
    """C x C counts; entry (i, j) = samples of true class i predicted as j."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise MetricsError(f"need at least one class, got {num_classes}")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, true: int, pred: int) -> None:
        c = self.num_classes
        if not (0 <= true < c and 0 <= pred < c):
            raise MetricsError(f"class pair ({true}, {pred}) outside [0, {c})")
        self.counts[true, pred] += 1

    def update_batch(self, true, pred) -> None:
        for t, p in zip(np.asarray(true).ravel(), np.asarray(pred).ravel()):
            self.update(int(t), int(p))

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Elementwise sum; associative and commutative across shards."""
        if other.num_classes != self.num_classes:
            raise MetricsError("cannot merge matrices of different sizes")
        merged = ConfusionMatrix(self.num_classes)
        merged.counts = self.counts + other.counts
        return merged


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def per_class_accuracy(cm: ConfusionMatrix) -> list[float]:
    """Diagonal over row sum per class; nan marks classes with no samples."""
    rows = cm.counts.sum(axis=1)
    out = []
    for i in range(cm.num_classes):
        out.append(float(cm.counts[i, i]) / rows[i] if rows[i] > 0 else float("nan"))
    return out


def average_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class accuracy; empty classes are excluded with a warning."""
    accs = per_class_accuracy(cm)
    present = [a for a in accs if not np.isnan(a)]
    if not present:
        raise MetricsError("no class has any sample")
    if len(present) < len(accs):
        warnings.warn(f"{len(accs) - len(present)} class(es) absent from the "
                      "matrix, excluded from average accuracy")
    return float(np.mean(present))


def kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e); 0 when p_e = 1."""
    total = cm.total
    if total == 0:
        raise MetricsError("empty confusion matrix")
    p_o = overall_accuracy(cm)
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    p_e = float((rows * cols).sum()) / (float(total) ** 2)
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


def report(cm: ConfusionMatrix) -> dict:
    """Metrics as table-style percentages (2 decimals) plus raw counts."""
    accs = per_class_accuracy(cm)
    return {
        "oa": round(100.0 * overall_accuracy(cm), 2),
        "aa": round(100.0 * average_accuracy(cm), 2),
        "kappa": round(100.0 * kappa(cm), 2),
        "per_class": [None if np.isnan(a) else round(100.0 * a, 2) for a in accs],
        "confusion": cm.counts.tolist(),
    }


def report_json(cm: ConfusionMatrix) -> str:
    return json.dumps(report(cm), sort_keys=True, separators=(",", ":"))
