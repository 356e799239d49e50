"""Training objective: query/token focal classification loss plus L1 localization loss.

Both terms are normalized by the number of matched (positive) queries and come
with closed-form gradients; :func:`gradcheck` compares those against central
finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import Assignment
from .model import Prediction, TokenSet, points_array

__all__ = [
    "LossConfig",
    "LossReport",
    "LossError",
    "focal_term",
    "focal_loss_and_grad",
    "positive_labels",
    "classification_loss",
    "localization_loss",
    "total_loss",
    "gradcheck",
]

SCORE_EPS = 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_cls: float = 5.0
    lambda_loc: float = 1.0
    gamma: float = 2.0
    alpha: float = 0.25
    label_all_tokens: bool = False

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not (self.lambda_cls >= 0 and self.lambda_loc >= 0):
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class LossReport:
    total: float
    cls: float
    loc: float
    n_pos: int
    grad_scores: np.ndarray
    grad_points: np.ndarray


def focal_loss_and_grad(s, y, gamma: float = 2.0, alpha: float = 0.25):
    """Elementwise focal loss and its derivative with respect to ``s``.

    Scores are clamped to ``[1e-7, 1 - 1e-7]``; the derivative is zero where
    the clamp is active.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (s > SCORE_EPS) & (s < 1.0 - SCORE_EPS)
    s = np.clip(s, SCORE_EPS, 1.0 - SCORE_EPS)
    q = 1.0 - s
    log_s, log_q = np.log(s), np.log(q)

    pos_loss = -alpha * q**gamma * log_s
    neg_loss = -(1.0 - alpha) * s**gamma * log_q
    # d/ds; gamma * x**(gamma-1) is written as gamma * x**gamma / x to stay finite at gamma = 0
    pos_grad = alpha * (gamma * q**gamma / q * log_s - q**gamma / s)
    neg_grad = -(1.0 - alpha) * (gamma * s**gamma / s * log_q - s**gamma / q)

    loss = np.where(y > 0.5, pos_loss, neg_loss)
    grad = np.where(y > 0.5, pos_grad, neg_grad) * inside
    return loss, grad


def focal_term(s: float, y: int, gamma: float = 2.0, alpha: float = 0.25) -> float:
    loss, _ = focal_loss_and_grad(s, y, gamma, alpha)
    return float(loss)


def positive_labels(text: TokenSet, label_all_tokens: bool = False) -> np.ndarray:
    """Token-wise target for a matched query: attribute tokens plus CLS, or every token."""
    if label_all_tokens:
        return np.ones(text.num_tokens)
    labels = text.mask_array.copy()
    labels[text.cls_index] = 1.0
    return labels


def classification_loss(scores, assignment: Assignment, text: TokenSet, cfg: LossConfig = LossConfig()):
    """Mean focal loss over all query/token pairs, normalized by the matched count.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``scores`` (``K x N``).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = len(assignment.pairs)
    if n_pos == 0:
        raise LossError("no positive matches")
    if scores.ndim != 2 or scores.shape[1] != text.num_tokens:
        raise LossError(f"scores must be K x {text.num_tokens}, got {scores.shape}")
    labels = np.zeros_like(scores)
    matched = [i for i, _ in assignment.pairs]
    labels[matched] = positive_labels(text, cfg.label_all_tokens)
    loss, grad = focal_loss_and_grad(scores, labels, cfg.gamma, cfg.alpha)
    return float(loss.sum() / n_pos), grad / n_pos


def _points_of(preds) -> np.ndarray:
    if isinstance(preds, np.ndarray):
        return points_array(preds)
    return points_array([p.point if isinstance(p, Prediction) else p for p in preds])


def localization_loss(preds, positives, assignment: Assignment):
    """Mean L1 distance of matched predictions to their targets.

    ``preds`` may be predictions or raw ``(K, 2)`` points. The gradient has one
    row per matched pair (in ``assignment.pairs`` order); the subgradient at a
    zero difference is 0.
    """
    n_pos = len(assignment.pairs)
    if n_pos == 0:
        raise LossError("no positive matches")
    P = _points_of(preds)
    G = points_array(positives)
    rows = [i for i, _ in assignment.pairs]
    cols = [j for _, j in assignment.pairs]
    diff = P[rows] - G[cols]
    loss = float(np.abs(diff).sum() / n_pos)
    return loss, np.sign(diff) / n_pos


def total_loss(scores, preds, positives, assignment: Assignment, text: TokenSet,
               cfg: LossConfig = LossConfig()) -> LossReport:
    cls, g_scores = classification_loss(scores, assignment, text, cfg)
    loc, g_points = localization_loss(preds, positives, assignment)
    return LossReport(
        total=cfg.lambda_cls * cls + cfg.lambda_loc * loc,
        cls=cls,
        loc=loc,
        n_pos=len(assignment.pairs),
        grad_scores=cfg.lambda_cls * g_scores,
        grad_points=cfg.lambda_loc * g_points,
    )


# --- finite-difference check ----------------------------------------------------

def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _random_instance(rng: np.random.Generator):
    from .matching import solve_assignment

    K = int(rng.integers(1, 9))
    N = int(rng.integers(1, 6))
    n_gt = int(rng.integers(1, K + 1))
    scores = rng.uniform(0.02, 0.98, size=(K, N))
    points = rng.uniform(0, 1, size=(K, 2))
    gts = rng.uniform(0, 1, size=(n_gt, 2))
    mask = rng.integers(0, 2, size=N)
    cls_index = int(rng.integers(N))
    mask[cls_index] = 0
    text = TokenSet(rng.normal(size=(N, 4)), tuple(mask), cls_index)
    assignment = solve_assignment(rng.uniform(size=(K, n_gt)))
    return scores, points, gts, text, assignment


def gradcheck(n_instances: int = 100, seed: int = 0, h: float = 1e-5, cfg: LossConfig = LossConfig()) -> dict:
    """Central-difference check of both loss gradients on random instances.

    L1 coordinates within ``1e-8`` of a kink are skipped. Returns the max
    relative error per operation.
    """
    rng = np.random.default_rng(seed)
    worst = {"classification_loss": 0.0, "localization_loss": 0.0}
    for _ in range(n_instances):
        scores, points, gts, text, assignment = _random_instance(rng)

        _, g = classification_loss(scores, assignment, text, cfg)
        num = np.zeros_like(scores)
        for idx in np.ndindex(scores.shape):
            up, dn = scores.copy(), scores.copy()
            up[idx] += h
            dn[idx] -= h
            num[idx] = (classification_loss(up, assignment, text, cfg)[0]
                        - classification_loss(dn, assignment, text, cfg)[0]) / (2 * h)
        worst["classification_loss"] = max(worst["classification_loss"], _rel_err(g, num))

        _, g = localization_loss(points, gts, assignment)
        rows = [i for i, _ in assignment.pairs]
        cols = [j for _, j in assignment.pairs]
        diff = points[rows] - gts[cols]
        num = np.zeros_like(g)
        keep = np.abs(diff) >= 1e-8
        for r, i in enumerate(rows):
            for c in range(2):
                up, dn = points.copy(), points.copy()
                up[i, c] += h
                dn[i, c] -= h
                num[r, c] = (localization_loss(up, gts, assignment)[0]
                             - localization_loss(dn, gts, assignment)[0]) / (2 * h)
        worst["localization_loss"] = max(worst["localization_loss"], _rel_err(g[keep], num[keep]))
    return worst
