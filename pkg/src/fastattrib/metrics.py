"""Ranking metrics."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats

from .numerics import PreconditionError


def map_at_L(pred_order, truth_order, L: int) -> float:
    """Average precision where the first ``L`` ids of ``truth_order`` are the
    positives and precision is read off the full predicted list."""
    pred = np.asarray(pred_order)
    truth = np.asarray(truth_order)
    if pred.size != truth.size or not np.array_equal(np.sort(pred), np.sort(truth)):
        raise PreconditionError("predicted and true orderings cover different ids")
    if not 1 <= L <= truth.size:
        raise PreconditionError(f"L={L} outside 1..{truth.size}")
    hit_ranks = np.flatnonzero(np.isin(pred, truth[:L])) + 1
    # correctly rounded sum, so the value does not depend on summation order
    return math.fsum((np.arange(1, L + 1) / hit_ranks).tolist()) / L


def random_ap_expectation(n: int, L: int) -> float:
    """Exact mean of ``map_at_L`` over uniformly random predicted orders."""
    if not 1 <= L <= n:
        raise PreconditionError(f"L={L} outside 1..{n}")
    H = math.fsum(1.0 / np.arange(1, n + 1))
    if n == 1:
        return 1.0
    return ((L - 1) * (n - H) / (n - 1) + H) / n


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


def order_to_positions(order, ids) -> np.ndarray:
    """Position of each of ``ids`` within ``order``."""
    order = np.asarray(order)
    pos = {int(i): k for k, i in enumerate(order)}
    return np.array([pos[int(i)] for i in ids])
