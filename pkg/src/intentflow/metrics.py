"""Evaluation metrics: F1 scores, detection curves, clustering agreement.

Conventions pinned here so every report is reproducible:

* ROC handles tied scores with average ranks (trapezoidal equivalent).
* PR area is the step-wise sum of precision times recall increments at
  each distinct threshold, no interpolation.
* NMI uses natural logs and the arithmetic-mean normalization
  2*I/(H(U)+H(V)); both-constant partitions score 1.0.
* Macro F1 averages over classes observed in truth or prediction;
  a class with no true positives scores F1=0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "confusion_counts",
    "micro_macro_f1",
    "roc_auroc",
    "aupr",
    "fpr_at_tpr",
    "nmi",
    "ari",
    "clustering_acc",
    "hungarian_assign",
    "calibrate_threshold",
]

REPORT_COLUMNS = (
    ("micro_f1", "Micro F1"),
    ("macro_f1", "Macro F1"),
    ("auroc", "AUROC"),
    ("aupr", "AUPR"),
    ("fpr90", "FPR90"),
    ("nmi", "NMI"),
    ("ari", "ARI"),
    ("acc", "ACC"),
)


@dataclass
class ConfusionCounts:
    """True-by-predicted count matrix over a shared ordered class list."""

    classes: list[int]
    matrix: np.ndarray  # shape (|C|, |C|), true rows x predicted columns

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


@dataclass
class MetricsReport:
    """Flat bundle of per-task metric values; fields absent for other tasks."""

    micro_f1: float | None = None
    macro_f1: float | None = None
    auroc: float | None = None
    aupr: float | None = None
    fpr90: float | None = None
    nmi: float | None = None
    ari: float | None = None
    acc: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def present(self) -> list[tuple[str, float]]:
        out = [(name, getattr(self, attr)) for attr, name in REPORT_COLUMNS
               if getattr(self, attr) is not None]
        out.extend(sorted(self.extra.items()))
        return out

    def to_kv_text(self) -> str:
        return "\n".join(f"{name}={value:.6f}" for name, value in self.present()) + "\n"

    def to_csv(self) -> str:
        items = self.present()
        header = ",".join(name for name, _ in items)
        row = ",".join(f"{value:.6f}" for _, value in items)
        return header + "\n" + row + "\n"


def _as_labels(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("label vector must be one-dimensional and non-empty")
    return arr


def confusion_counts(true_labels, predicted_labels) -> ConfusionCounts:
    """Count matrix over the union of classes seen in truth or prediction."""
    t = _as_labels(true_labels)
    p = _as_labels(predicted_labels)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} true vs {p.size} predicted")
    classes = sorted(set(t.tolist()) | set(p.tolist()))
    index = {c: i for i, c in enumerate(classes)}
    mat = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for ti, pi in zip(t.tolist(), p.tolist()):
        mat[index[ti], index[pi]] += 1
    return ConfusionCounts(classes=classes, matrix=mat)


def micro_macro_f1(true_labels, predicted_labels) -> tuple[float, float]:
    """Micro F1 (harmonic mean of micro P/R) and macro F1 (mean per-class F1)."""
    counts = confusion_counts(true_labels, predicted_labels)
    mat = counts.matrix
    tp = np.diag(mat).astype(float)
    fp = mat.sum(axis=0) - tp
    fn = mat.sum(axis=1) - tp

    tp_sum, fp_sum, fn_sum = tp.sum(), fp.sum(), fn.sum()
    micro_p = tp_sum / (tp_sum + fp_sum) if tp_sum + fp_sum > 0 else 0.0
    micro_r = tp_sum / (tp_sum + fn_sum) if tp_sum + fn_sum > 0 else 0.0
    micro = (2 * micro_p * micro_r / (micro_p + micro_r)
             if micro_p + micro_r > 0 else 0.0)

    denom = 2 * tp + fp + fn
    per_class = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    macro = float(per_class.mean())
    return float(micro), macro


def _scores_and_flags(scores, is_positive) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(is_positive, dtype=bool)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise ValueError("scores and flags must be equal-length 1-D arrays")
    return s, y


def roc_auroc(scores, is_ood) -> float:
    """Rank-based AUROC (Mann-Whitney) with average ranks on ties.

    Positives are the OOD flags; equals P(s_pos > s_neg) + 0.5 P(equal).
    """
    s, y = _scores_and_flags(scores, is_ood)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative examples")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=float)
    sorted_s = s[order]
    # average ranks over tied groups, 1-based
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def aupr(scores, is_ood) -> float:
    """Area under the precision-recall step curve, positives = OOD."""
    s, y = _scores_and_flags(scores, is_ood)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPR needs at least one positive example")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    pred_pos = np.arange(1, s.size + 1)
    # evaluate only at the last index of each distinct-score group
    distinct = np.nonzero(np.diff(s_sorted, append=np.nan))[0]
    precision = tp[distinct] / pred_pos[distinct]
    recall = tp[distinct] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def calibrate_threshold(positive_scores, target_tpr: float) -> float:
    """Largest threshold keeping at least target_tpr of positives >= it.

    Equals the k-th smallest positive score with k = n - ceil(t*n) + 1.
    """
    s = np.asarray(positive_scores, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("need at least one positive score to calibrate")
    if not 0.0 < target_tpr <= 1.0:
        raise ValueError(f"target TPR must be in (0, 1], got {target_tpr}")
    n = s.size
    k = n - math.ceil(target_tpr * n - 1e-9) + 1
    k = max(k, 1)
    return float(np.sort(s)[k - 1])


def fpr_at_tpr(scores, is_ood, target_tpr: float) -> float:
    """FPR at the largest threshold reaching TPR >= target (positive iff >=)."""
    s, y = _scores_and_flags(scores, is_ood)
    if not y.any() or y.all():
        raise ValueError("FPR@TPR needs both positive and negative examples")
    lam = calibrate_threshold(s[y], target_tpr)
    neg = s[~y]
    return float(np.mean(neg >= lam))


def _entropy(counts: np.ndarray) -> float:
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ca = {v: i for i, v in enumerate(sorted(set(a.tolist())))}
    cb = {v: i for i, v in enumerate(sorted(set(b.tolist())))}
    mat = np.zeros((len(ca), len(cb)), dtype=np.int64)
    for x, y in zip(a.tolist(), b.tolist()):
        mat[ca[x], cb[y]] += 1
    return mat


def nmi(labels_a, labels_b) -> float:
    """Normalized mutual information, 2*I/(H_a+H_b), natural logs."""
    a = _as_labels(labels_a)
    b = _as_labels(labels_b)
    if a.shape != b.shape:
        raise ValueError("label vectors must have equal length")
    cont = _contingency(a, b)
    n = cont.sum()
    ha = _entropy(cont.sum(axis=1).astype(float))
    hb = _entropy(cont.sum(axis=0).astype(float))
    if ha + hb == 0.0:
        # both partitions are single-cluster, hence identical
        return 1.0
    pij = cont / n
    pa = cont.sum(axis=1) / n
    pb = cont.sum(axis=0) / n
    outer = np.outer(pa, pb)
    mask = pij > 0
    info = float((pij[mask] * np.log(pij[mask] / outer[mask])).sum())
    return 2.0 * info / (ha + hb)


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index via pair counting; can be negative."""
    a = _as_labels(labels_a)
    b = _as_labels(labels_b)
    if a.shape != b.shape:
        raise ValueError("label vectors must have equal length")
    cont = _contingency(a, b)
    n = int(cont.sum())

    def pairs(x: np.ndarray) -> float:
        x = x.astype(float)
        return float((x * (x - 1) / 2.0).sum())

    sum_ij = pairs(cont)
    sum_a = pairs(cont.sum(axis=1))
    sum_b = pairs(cont.sum(axis=0))
    total = n * (n - 1) / 2.0
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # degenerate cases (both single-cluster or both all-singletons)
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def hungarian_assign(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of min(r, c) pairs.

    Rectangular inputs are allowed; the solver pads internally. Backed by
    scipy's O(n^3) linear sum assignment.
    """
    mat = np.asarray(cost, dtype=float)
    if mat.ndim != 2 or mat.size == 0:
        raise ValueError("cost must be a non-empty 2-D matrix")
    if not np.isfinite(mat).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(mat)
    return list(zip(rows.tolist(), cols.tolist()))


def clustering_acc(true_labels, cluster_labels) -> tuple[float, dict[int, int]]:
    """Accuracy under the best one-to-one cluster-to-class mapping.

    Returns (acc, mapping) where mapping sends cluster label -> true label
    for matched clusters only; samples of unmatched clusters count as errors.
    """
    t = _as_labels(true_labels)
    c = _as_labels(cluster_labels)
    if t.shape != c.shape:
        raise ValueError("label vectors must have equal length")
    cluster_ids = sorted(set(c.tolist()))
    class_ids = sorted(set(t.tolist()))
    weight = np.zeros((len(cluster_ids), len(class_ids)), dtype=np.int64)
    cl_index = {v: i for i, v in enumerate(cluster_ids)}
    cls_index = {v: i for i, v in enumerate(class_ids)}
    for ci, ti in zip(c.tolist(), t.tolist()):
        weight[cl_index[ci], cls_index[ti]] += 1
    pairs = hungarian_assign(-weight.astype(float))
    mapping = {cluster_ids[i]: class_ids[j] for i, j in pairs}
    matched = sum(int(weight[i, j]) for i, j in pairs)
    return matched / t.size, mapping
