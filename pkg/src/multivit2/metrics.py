from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


def compute_accuracy(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if len(probs) != len(labels):
        raise DataError(f"{len(probs)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("accuracy of an empty set is undefined")
    # np.argmax returns the first maximum, i.e. ties go to class 0
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def compute_auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney statistic, ties counted as half a win."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise DataError(f"{len(scores)} scores for {len(labels)} labels")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    # rank sums are half-integers, so this numerator is exact
    wins = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(wins / (n_pos * n_neg))
