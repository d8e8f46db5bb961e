"""Clustering accuracy (best one-to-one mapping), NMI, confusion matrices, trial summaries."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


def contingency(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts table between two integer labelings, plus the sorted label values."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table, ua, ub


def clustering_accuracy(true_labels, assignments) -> tuple[float, dict[int, int]]:
    """Fraction matched under the best one-to-one cluster -> class mapping.

    Clusters left unmatched (more clusters than classes) count as errors.
    """
    true_labels, assignments = np.asarray(true_labels), np.asarray(assignments)
    if true_labels.shape != assignments.shape:
        raise ValueError(f"length mismatch: {true_labels.shape} vs {assignments.shape}")
    if true_labels.size == 0:
        return 1.0, {}
    table, clusters, classes = contingency(assignments, true_labels)
    rows, cols = linear_sum_assignment(table, maximize=True)
    mapping = {int(clusters[r]): int(classes[c]) for r, c in zip(rows, cols)}
    matched = int(table[rows, cols].sum())
    return matched / true_labels.size, mapping


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(true_labels, assignments) -> float:
    """2 I(y; c) / (H(y) + H(c)) with natural logarithms."""
    table, _, _ = contingency(true_labels, assignments)
    n = table.sum()
    if n == 0:
        return 1.0
    h_true, h_pred = _entropy(table.sum(1)), _entropy(table.sum(0))
    if h_true + h_pred == 0:
        warnings.warn("both labelings are constant; NMI defined as 1", RuntimeWarning, stacklevel=2)
        return 1.0
    if h_true == 0 or h_pred == 0:
        warnings.warn("one labeling is constant; NMI is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    pij = table / n
    outer = np.outer(pij.sum(1), pij.sum(0))
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(np.clip(2.0 * mi / (h_true + h_pred), 0.0, 1.0))


def confusion_matrix(true_labels, predictions, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts (rows = true class) and row-normalised percentages."""
    t, p = np.asarray(true_labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("length mismatch")
    for name, v in (("true label", t), ("prediction", p)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ValueError(f"{name} outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    rows = cm.sum(1, keepdims=True)
    pct = np.divide(100.0 * cm, rows, out=np.zeros(cm.shape), where=rows > 0)
    return cm, pct


@dataclass
class EvalReport:
    acc: float
    nmi: float
    confusion: list
    mapping: dict
    n: int
    accuracy: float | None = None  # plain accuracy for classifiers

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["mapping"] = {int(k): int(v) for k, v in d["mapping"].items()}
        return cls(**d)


def evaluate(true_labels, assignments, n_classes: int, direct: bool = False) -> EvalReport:
    """Build an EvalReport.

    ``direct`` marks class-aligned predictions (classifier output or
    semi-supervised pseudo-labels): the mapping is the identity and ``acc``
    equals plain accuracy.  Otherwise the confusion matrix is expressed
    after the optimal cluster -> class mapping.
    """
    t, a = np.asarray(true_labels), np.asarray(assignments)
    if direct:
        mapping = {int(c): int(c) for c in np.unique(a)}
        acc = float(np.mean(t == a)) if len(t) else 1.0
        mapped = a
    else:
        acc, mapping = clustering_accuracy(t, a)
        # unmatched clusters go to class ids nobody maps to, so they land off the diagonal
        full = dict(mapping)
        spare = iter(sorted(set(range(n_classes)) - set(mapping.values())))
        for c in np.unique(a):
            if int(c) not in full:
                full[int(c)] = next(spare, -1)
        mapped = np.array([full[int(c)] for c in a], dtype=np.int64)
    keep = mapped >= 0
    cm, _ = confusion_matrix(t[keep], mapped[keep], n_classes)
    accuracy = acc if direct else None
    return EvalReport(acc=acc, nmi=nmi(t, a), confusion=cm.tolist(), mapping=mapping, n=int(len(t)),
                      accuracy=accuracy)


def trial_summary(values) -> dict[str, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("no trials to summarise")
    return {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()), "max": float(v.max()),
            "n": int(v.size)}
