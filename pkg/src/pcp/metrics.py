from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from pcp.errors import DataError


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """ROC AUC via the Mann-Whitney rank statistic; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative instance")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc(scores, labels: Sequence[int]) -> float:
    """One-vs-rest ROC AUC macro-averaged over the classes present in ``labels``.

    ``scores`` is (n, C): margins, logits or posteriors, column c scoring class c.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != len(labels):
        raise DataError(f"scores {scores.shape} do not match {len(labels)} labels")
    present = np.unique(labels)
    if len(present) < 2:
        raise DataError("AUC is undefined with fewer than two classes present")
    if present.max() >= scores.shape[1] or present.min() < 0:
        raise DataError(f"labels outside [0, {scores.shape[1]})")
    return float(np.mean([binary_auc(scores[:, c], labels == c) for c in present]))
