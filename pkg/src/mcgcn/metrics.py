"""Macro one-vs-rest ROC AUC with midrank ties, plus argmax accuracy."""

from __future__ import annotations

import numpy as np


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError(f"scores must be an (N, K>=2) matrix, got {scores.shape}")
    if labels.shape != (scores.shape[0],):
        raise ValueError("one label per score row required")
    if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise ValueError("label outside the score columns")
    return scores, labels


def midranks(x) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC of ``scores`` for the boolean ``positive`` mask."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative example")
    r = midranks(scores)
    u = r[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(scores, labels) -> dict[int, float]:
    """One-vs-rest AUC for every class that occurs in ``labels``."""
    scores, labels = _check(scores, labels)
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError("all labels identical; AUC undefined")
    return {int(c): binary_auc(scores[:, c], labels == c) for c in present}


def multiclass_auc(scores, labels) -> float:
    per = per_class_auc(scores, labels)
    vals = [per[c] for c in sorted(per)]
    return float(np.sum(vals) / len(vals))


def accuracy(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return float(np.mean(np.argmax(scores, axis=1) == labels))
