"""Ranking metrics for binary outcomes, with explicit tie handling.

Both metrics are pure rank statistics: invariant under any strictly
increasing transform of the scores. Tie rules are pinned down because the
evaluation report depends on them: AUC gives ties half credit, AP breaks
score ties by stable original order.
"""

from __future__ import annotations

import numpy as np

from .errors import KTGraphError


class UndefinedMetricError(KTGraphError):
    """The metric needs both classes (AUC) or at least one positive (AP)."""


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length 1-D, got {s.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    return s, y


def _tied_ranks(x):
    """1-based ranks, ties sharing their average rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    avg = (starts + ends + 1) / 2.0
    return avg[inverse]


def auc_roc(scores, labels):
    """P(score_pos > score_neg) + 0.5 * P(score_pos == score_neg).

    Computed via the rank (Mann-Whitney) formulation, so any strictly
    increasing rescoring leaves the value exactly unchanged.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes (got {n_pos} positives, {n_neg} negatives)")
    ranks = _tied_ranks(s)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels):
    """Mean of precision-at-rank over the positive positions.

    Ranking is by descending score; ties keep their original order (stable
    sort), and that rule is part of the metric's contract here.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits == 1].mean())
