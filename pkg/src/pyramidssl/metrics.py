"""Evaluation metrics: rank-based AUROC and overlap Dice."""

from __future__ import annotations

import warnings

import numpy as np
from scipy import stats

from .errors import ShapeError, UndefinedMetric


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic, ties averaged.

    Equivalent to the fraction of (positive, negative) pairs ordered
    correctly, counting ties as 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"scores / labels length mismatch: {scores.shape} vs {labels.shape}")
    positive = labels == 1
    n_pos = int(np.count_nonzero(positive))
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(
            f"AUROC undefined: {n_pos} positives and {n_neg} negatives"
        )
    ranks = stats.rankdata(scores, method="average")
    rank_sum = float(ranks[positive].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def mean_auroc(scores, labels) -> tuple[float, list]:
    """Per-class AUROC over a (n, k) score/label matrix.

    Single-valued classes are excluded from the mean with a warning and
    reported as None; if every class is excluded the metric is undefined.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores = scores[:, None]
    if labels.ndim == 1:
        labels = labels[:, None]
    if scores.shape != labels.shape:
        raise ShapeError(f"scores / labels shape mismatch: {scores.shape} vs {labels.shape}")
    per_class: list = []
    valid = []
    for c in range(scores.shape[1]):
        try:
            value = auroc(scores[:, c], labels[:, c])
        except UndefinedMetric:
            warnings.warn(
                f"class {c} is single-valued; excluded from mean AUROC", stacklevel=2
            )
            per_class.append(None)
            continue
        per_class.append(value)
        valid.append(value)
    if not valid:
        raise UndefinedMetric("AUROC undefined for every class")
    return float(np.mean(valid)), per_class


def dice(pred, target) -> float:
    """Overlap Dice on binary masks: 2|A∩B| / (|A|+|B|); both-empty is 1."""
    a = np.asarray(pred)
    b = np.asarray(target)
    if a.shape != b.shape:
        raise ShapeError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / total
