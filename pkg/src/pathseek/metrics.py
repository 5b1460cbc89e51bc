"""Ranking metrics shared by training validation and the benchmark."""

from __future__ import annotations

import logging

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger("pathseek")


def binary_auc(scores, positives) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("binary_auc needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_auc(scores, labels, num_classes: int | None = None) -> float:
    """Macro one-vs-rest AUC.

    ``scores`` is ``(n, N)`` class scores (or a 1-D positive-class score for
    the binary case). Classes without both positives and negatives are skipped.
    """
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        if set(np.unique(y)) - {0, 1}:
            raise ValueError("1-D scores require binary labels")
        return binary_auc(s, y == 1)
    n = s.shape[1] if num_classes is None else num_classes
    aucs = []
    for k in range(n):
        pos = y == k
        if pos.all() or not pos.any():
            log.info("compute_auc: skipping class %d (no positives or no negatives)", k)
            continue
        aucs.append(binary_auc(s[:, k], pos))
    if not aucs:
        raise ValueError("compute_auc: degenerate label set, no class has both positives and negatives")
    return float(np.mean(aucs))
