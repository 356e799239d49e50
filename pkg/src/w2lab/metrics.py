"""Counting (MAE/RMSE) and point-localization (Precision/Recall/F1) metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .matching import solve_assignment
from .model import points_array

__all__ = ["MetricsReport", "counting_errors", "localize_match", "prf1", "evaluate"]


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tau: float

    def to_dict(self) -> dict:
        return asdict(self)


def counting_errors(gt_counts: Sequence[int], pred_counts: Sequence[int]) -> tuple[float, float]:
    gt = np.asarray(gt_counts, dtype=np.float64)
    pred = np.asarray(pred_counts, dtype=np.float64)
    if gt.size == 0 or gt.shape != pred.shape:
        raise ValueError("count sequences must be nonempty and of equal length")
    err = gt - pred
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2)))


def localize_match(gt, preds, tau: float):
    """One-to-one matching of predictions to ground truth within distance ``tau``.

    Maximizes the number of matched pairs, breaking ties by minimum total
    Euclidean distance. Returns ``(tp, fp, fn, pairs)`` with pairs given as
    ``(pred_index, gt_index)``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    G = points_array(gt)
    P = points_array(preds)
    if len(G) == 0 or len(P) == 0:
        return 0, len(P), len(G), []
    d = np.hypot(P[:, None, 0] - G[None, :, 0], P[:, None, 1] - G[None, :, 1])
    feasible = d <= tau
    # Any infeasible pair costs more than every feasible pair combined, so the
    # minimum-cost solution has maximum cardinality among feasible pairs.
    big = (min(len(P), len(G)) + 1) * tau + 1.0
    cost = np.where(feasible, d, big)
    result = solve_assignment(cost)
    pairs = [(i, j) for i, j in result.pairs if feasible[i, j]]
    tp = len(pairs)
    return tp, len(P) - tp, len(G) - tp, pairs


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # zero denominators: no predictions -> P = 1, no ground truth -> R = 1
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def evaluate(gt_sets: Sequence, pred_sets: Sequence, tau: float) -> MetricsReport:
    """Aggregate report over image/expression pairs.

    Counting errors use the per-pair counts; localization counts are summed
    over all pairs before computing Precision/Recall/F1.
    """
    if len(gt_sets) != len(pred_sets) or not gt_sets:
        raise ValueError("need the same nonzero number of ground-truth and prediction sets")
    if not math.isfinite(tau):
        raise ValueError("tau must be finite")
    tp = fp = fn = 0
    for gt, preds in zip(gt_sets, pred_sets):
        a, b, c, _ = localize_match(gt, preds, tau)
        tp, fp, fn = tp + a, fp + b, fn + c
    mae, rmse = counting_errors([len(g) for g in gt_sets], [len(p) for p in pred_sets])
    precision, recall, f1 = prf1(tp, fp, fn)
    return MetricsReport(mae, rmse, precision, recall, f1, tp, fp, fn, float(tau))
