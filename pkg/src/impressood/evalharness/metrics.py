"""Threshold-free OOD metrics.

Scores follow the higher-is-OOD convention; ID is the positive class for
TPR and for AUPR-in.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata


def _prep(id_scores, ood_scores):
    id_s = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_s = np.asarray(ood_scores, dtype=np.float64).ravel()
    if id_s.size == 0 or ood_s.size == 0:
        raise ValueError("both ID and OOD score arrays must be non-empty")
    return id_s, ood_s


def auroc(id_scores, ood_scores) -> float:
    """P(OOD score > ID score) with ties counted half (Mann-Whitney form)."""
    id_s, ood_s = _prep(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([id_s, ood_s]))
    n_id, n_ood = id_s.size, ood_s.size
    u = ranks[n_id:].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_id * n_ood))


def tnr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """OOD fraction above the smallest threshold that keeps ``tpr`` of ID at or below it."""
    id_s, ood_s = _prep(id_scores, ood_scores)
    k = max(math.ceil(tpr * id_s.size - 1e-9), 1)
    threshold = np.sort(id_s)[k - 1]
    return float(np.mean(ood_s > threshold))


def detection_accuracy(id_scores, ood_scores) -> float:
    """Best balanced accuracy 0.5 * (TPR + TNR) over the pooled score values."""
    id_s, ood_s = _prep(id_scores, ood_scores)
    thresholds = np.unique(np.concatenate([id_s, ood_s]))
    tpr = np.searchsorted(np.sort(id_s), thresholds, side="right") / id_s.size
    tnr = 1.0 - np.searchsorted(np.sort(ood_s), thresholds, side="right") / ood_s.size
    return float(np.max(0.5 * (tpr + tnr)))


def aupr_in(id_scores, ood_scores) -> float:
    """Step-interpolated area under precision-recall, ID positive, low score = ID."""
    id_s, ood_s = _prep(id_scores, ood_scores)
    thresholds = np.unique(np.concatenate([id_s, ood_s]))
    tp = np.searchsorted(np.sort(id_s), thresholds, side="right")
    fp = np.searchsorted(np.sort(ood_s), thresholds, side="right")
    recall = tp / id_s.size
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))


METRICS = {
    "tnr_at_tpr95": tnr_at_tpr,
    "auroc": auroc,
    "detection_acc": detection_accuracy,
    "aupr_in": aupr_in,
}


def all_metrics(id_scores, ood_scores) -> dict:
    return {name: fn(id_scores, ood_scores) for name, fn in METRICS.items()}
