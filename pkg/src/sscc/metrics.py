"""Clustering evaluation with Hungarian label matching, and the divergence score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class EvalReport:
    acc: float
    kappa: float
    nmi: float
    ari: float
    purity: float
    per_class_acc: np.ndarray
    matching: np.ndarray
    confusion: np.ndarray = field(repr=False)
    divergence: float | None = None

    FIELDS = ("acc", "kappa", "nmi", "ari", "purity", "divergence")

    def row(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}

    def text(self) -> str:
        lines = [f"{name:<11}{getattr(self, name):.6f}" for name in self.FIELDS[:5]]
        if self.divergence is not None:
            lines.append(f"{'divergence':<11}{self.divergence:.6f}")
        lines.append("per-class accuracy:")
        lines += [f"  class {c:<4}{a:.6f}" for c, a in enumerate(self.per_class_acc)]
        lines.append("matching (predicted -> true):")
        lines += [f"  {p} -> {t}" for p, t in enumerate(self.matching)]
        return "\n".join(lines) + "\n"


def _validate(pred, truth, num_classes):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size == 0:
        raise ValueError("need at least one sample")
    for name, arr in (("prediction", pred), ("ground-truth", truth)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} label outside [0, {num_classes})")
    return pred, truth


def contingency(pred, truth, num_classes: int) -> np.ndarray:
    """``table[p, t]`` counts samples predicted ``p`` with true class ``t``."""
    pred, truth = _validate(pred, truth, num_classes)
    table = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(table, (pred, truth), 1)
    return table


def _best_assignment(table):
    rows, cols = linear_sum_assignment(table, maximize=True)
    return int(table[rows, cols].sum())


def hungarian_match(pred, truth, num_classes: int) -> np.ndarray:
    """Permutation ``perm`` (predicted ``p`` -> true ``perm[p]``) maximising agreement.

    Among optimal permutations the lexicographically smallest is returned:
    each predicted label in turn takes the smallest true label that still
    admits an optimal completion.
    """
    table = contingency(pred, truth, num_classes)
    best = _best_assignment(table)
    perm = np.full(num_classes, -1, dtype=np.int64)
    free_rows = list(range(num_classes))
    free_cols = list(range(num_classes))
    gained = 0
    for p in range(num_classes):
        free_rows.remove(p)
        for t in free_cols:
            rest_cols = [c for c in free_cols if c != t]
            rest = _best_assignment(table[np.ix_(free_rows, rest_cols)]) if free_rows else 0
            if gained + table[p, t] + rest == best:
                perm[p] = t
                gained += table[p, t]
                free_cols.remove(t)
                break
    return perm


def matched_count(pred, truth, perm) -> int:
    return int(np.sum(np.asarray(perm)[np.asarray(pred)] == np.asarray(truth)))


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi_from_table(table: np.ndarray) -> float:
    """Mutual information over the geometric mean of the two entropies.

    A partition with a single occupied cluster has zero entropy; NMI is then 0.
    """
    n = table.sum()
    h_pred = _entropy(table.sum(axis=1))
    h_true = _entropy(table.sum(axis=0))
    if h_pred == 0.0 or h_true == 0.0:
        return 0.0
    joint = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / n**2
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    return max(0.0, min(1.0, mi / math.sqrt(h_pred * h_true)))


def ari_from_table(table: np.ndarray) -> float:
    def pairs(x):
        x = np.asarray(x, dtype=np.float64)
        return float((x * (x - 1) / 2).sum())

    n = table.sum()
    index = pairs(table)
    a = pairs(table.sum(axis=1))
    b = pairs(table.sum(axis=0))
    total = n * (n - 1) / 2
    expected = a * b / total if total else 0.0
    maximum = (a + b) / 2
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


def kappa_from_confusion(confusion: np.ndarray) -> float:
    n = confusion.sum()
    observed = np.trace(confusion) / n
    chance = float(confusion.sum(axis=0) @ confusion.sum(axis=1)) / n**2
    if chance == 1.0:
        return 1.0
    return (observed - chance) / (1.0 - chance)


def clustering_metrics(pred, truth, num_classes: int) -> EvalReport:
    """ACC, Kappa, NMI, ARI and Purity after Hungarian matching."""
    pred, truth = _validate(pred, truth, num_classes)
    table = contingency(pred, truth, num_classes)
    perm = hungarian_match(pred, truth, num_classes)
    mapped = perm[pred]
    # confusion[t, p]: true class t predicted (after mapping) as p
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (truth, mapped), 1)
    n = pred.size
    class_sizes = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), class_sizes, out=np.zeros(num_classes),
                          where=class_sizes > 0)
    return EvalReport(
        acc=float(np.trace(confusion) / n),
        kappa=float(kappa_from_confusion(confusion)),
        nmi=nmi_from_table(table),
        ari=float(ari_from_table(table)),
        purity=float(table.max(axis=1).sum() / n),
        per_class_acc=per_class,
        matching=perm,
        confusion=confusion,
    )


class DegenerateGeometry(ValueError):
    pass


def _cos(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def divergence_score(y, truth) -> float:
    """Ratio of summed within-class cohesion to summed between-class cosine scatter.

    Each class contributes the mean cosine similarity of its rows to the
    class mean (numerator) and the cosine similarity of its mean to the
    global mean (denominator).
    """
    y = np.asarray(y, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if y.shape[0] != truth.size:
        raise ValueError("rows of y and truth labels differ in length")
    classes = np.unique(truth)
    if classes.size == 0 or classes.size != classes.max() + 1:
        raise ValueError("every class in 0..C-1 must have at least one sample")
    global_mean = y.mean(axis=0)
    if not np.linalg.norm(global_mean) > 0:
        raise DegenerateGeometry("global mean representation is zero")
    within = 0.0
    between = 0.0
    for c in classes:
        rows = y[truth == c]
        centroid = rows.mean(axis=0)
        norm_c = np.linalg.norm(centroid)
        if not norm_c > 0:
            raise DegenerateGeometry(f"class {c} mean representation is zero")
        row_norms = np.linalg.norm(rows, axis=1)
        within += float(np.mean(rows @ centroid / (np.where(row_norms > 0, row_norms, 1.0) * norm_c)))
        between += _cos(centroid, global_mean)
    if abs(between) < 1e-15:
        raise DegenerateGeometry("between-class scatter is zero")
    return within / between


def evaluate(pred, truth, num_classes: int, y=None) -> EvalReport:
    """:func:`clustering_metrics` plus the divergence score when ``y`` is given."""
    report = clustering_metrics(pred, truth, num_classes)
    if y is not None:
        report.divergence = divergence_score(y, truth)
    return report
