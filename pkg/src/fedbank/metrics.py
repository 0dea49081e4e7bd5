"""Evaluation metrics: accuracy, cluster purity, ROC-AUC."""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .models import Array


def accuracy(probs: Array, y: Array) -> float:
    """Fraction of rows whose argmax matches the label."""
    probs = np.asarray(probs)
    y = np.asarray(y)
    if probs.shape[0] != y.shape[0]:
        raise DomainError("predictions and labels must have equal length")
    return float((probs.argmax(axis=1) == y).mean())


def cluster_purity(learned, truth) -> float:
    """Max-overlap purity: each learned cluster votes for its majority plant."""
    learned = np.asarray(list(learned))
    truth = np.asarray(list(truth))
    if learned.shape != truth.shape or learned.size == 0:
        raise DomainError("purity needs matching nonempty assignment vectors")
    matched = 0
    for g in np.unique(learned):
        members = truth[learned == g]
        _, counts = np.unique(members, return_counts=True)
        matched += int(counts.max())
    return matched / learned.size


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via tie-averaged ranks (higher score = positive)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels).astype(bool)
    if s.shape != pos.shape:
        raise DomainError("scores and labels must have equal length")
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("ROC-AUC needs both positive and negative examples")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and sorted_s[j] == sorted_s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)
        i = j
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
