"""One-to-one point matching with a repulsive term that keeps look-alike subclasses apart.

The matching cost between prediction ``i`` and target point ``j`` is::

    lambda_cls * (1 - s_i) + lambda_l1 * |p_i - p_j|_1 + lambda_rep * C_rep(p_i, p_j)

where ``C_rep`` is a repulsive term built from the ambiguity ratio
``R = d_neg / d_pos`` (distance to the nearest distractor over distance to the
candidate target). The assignment engine is a shortest-augmenting-path
Hungarian solver with deterministic, lexicographically smallest tie-breaking.
"""
from __future__ import annotations

import enum
import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Prediction, Scene, points_array

__all__ = [
    "CostWeights",
    "Variant",
    "RepulsiveForm",
    "Assignment",
    "MatchingError",
    "ambiguity_ratio",
    "repulsive_cost",
    "match_cost",
    "cost_matrices",
    "solve_assignment",
    "assign",
    "oracle_assign",
]

INF = math.inf


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class CostWeights:
    lambda_cls: float = 5.0
    lambda_l1: float = 1.0
    lambda_rep: float = 0.2

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_l1", "lambda_rep"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


class Variant(str, enum.Enum):
    NONE = "none"
    EXP_RATIO = "exp"
    INVERSE_NEG_DIST = "invneg"
    NORMALIZED_POS_DIST = "normpos"
    HINGE_RATIO = "hinge"


VARIANT_LABELS = {
    Variant.NONE: "No Repulsion",
    Variant.INVERSE_NEG_DIST: "Inverse Negative Distance",
    Variant.NORMALIZED_POS_DIST: "Normalized Positive Distance",
    Variant.HINGE_RATIO: "Hinge on Ratio",
    Variant.EXP_RATIO: "Exponential Ratio",
}


@dataclass(frozen=True)
class RepulsiveForm:
    variant: Variant = Variant.EXP_RATIO
    epsilon: float = 1e-6  # only used by INVERSE_NEG_DIST

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.INVERSE_NEG_DIST and not self.epsilon > 0:
            raise ValueError("epsilon must be positive for the inverse negative distance form")

    @classmethod
    def all(cls) -> list["RepulsiveForm"]:
        """Every variant, in the order the ablation table lists them."""
        order = (Variant.NONE, Variant.INVERSE_NEG_DIST, Variant.NORMALIZED_POS_DIST,
                 Variant.HINGE_RATIO, Variant.EXP_RATIO)
        return [cls(v) for v in order]

    @property
    def label(self) -> str:
        return VARIANT_LABELS[self.variant]


@dataclass(frozen=True)
class Assignment:
    """One-to-one matching between prediction rows and target columns.

    ``pairs`` are ``(prediction_index, positive_index)`` sorted by prediction
    index. ``ambiguity_ratios`` is empty when the assignment was solved from a
    bare cost matrix.
    """

    pairs: tuple
    total_cost: float
    pair_costs: tuple
    ambiguity_ratios: tuple = field(default=())

    @property
    def n_pos(self) -> int:
        return len(self.pairs)

    def to_dict(self) -> dict:
        def enc(x):
            if math.isinf(x):
                return "inf" if x > 0 else "-inf"
            return x

        return {
            "pairs": [[int(i), int(j)] for i, j in self.pairs],
            "total_cost": enc(self.total_cost),
            "pair_costs": [enc(c) for c in self.pair_costs],
            "ambiguity_ratios": [enc(r) for r in self.ambiguity_ratios],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Assignment":
        dec = float  # float("inf") parses the string form
        return cls(
            pairs=tuple((int(i), int(j)) for i, j in obj["pairs"]),
            total_cost=dec(obj["total_cost"]),
            pair_costs=tuple(dec(c) for c in obj["pair_costs"]),
            ambiguity_ratios=tuple(dec(r) for r in obj.get("ambiguity_ratios", [])),
        )


# --- cost terms ---------------------------------------------------------------

def _nearest_negative_distance(pred: np.ndarray, negatives) -> float:
    negs = points_array(negatives)
    if len(negs) == 0:
        return INF
    return float(np.min(np.hypot(negs[:, 0] - pred[0], negs[:, 1] - pred[1])))


def ambiguity_ratio(pred, pos, negatives) -> float:
    """Nearest-distractor distance over distance to ``pos`` (Euclidean).

    ``+inf`` when there are no distractors or ``pred`` sits exactly on ``pos``.
    Coordinates are not range-checked, so scaled copies of a scene are fine.
    """
    pred = np.asarray(pred, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    d_neg = _nearest_negative_distance(pred, negatives)
    d_pos = float(np.hypot(*(pred - pos)))
    if math.isinf(d_neg) or d_pos == 0.0:
        return INF
    return d_neg / d_pos


def repulsive_cost(R: float, form: RepulsiveForm, d_pos: float, d_neg: float) -> float:
    v = form.variant
    if v is Variant.NONE:
        return 0.0
    if v is Variant.EXP_RATIO:
        return 0.0 if math.isinf(R) else math.exp(-R)
    if v is Variant.HINGE_RATIO:
        return 0.0 if math.isinf(R) else max(0.0, 1.0 - R)
    if v is Variant.INVERSE_NEG_DIST:
        return 0.0 if math.isinf(d_neg) else 1.0 / (d_neg + form.epsilon)
    if v is Variant.NORMALIZED_POS_DIST:
        if math.isinf(d_neg) or d_pos == 0.0:
            return 0.0
        return d_pos / (d_pos + d_neg)
    raise ValueError(f"unknown repulsive form {v!r}")


def match_cost(pred: Prediction, pos, negatives, w: CostWeights, form: RepulsiveForm) -> float:
    p = np.asarray(pred.point, dtype=np.float64)
    g = np.asarray(pos, dtype=np.float64)
    l1 = float(np.abs(p - g).sum())
    d_neg = _nearest_negative_distance(p, negatives)
    d_pos = float(np.hypot(*(p - g)))
    R = INF if (math.isinf(d_neg) or d_pos == 0.0) else d_neg / d_pos
    return w.lambda_cls * (1.0 - pred.cls_score) + w.lambda_l1 * l1 + w.lambda_rep * repulsive_cost(R, form, d_pos, d_neg)


def _repulsive_matrix(R, d_pos, d_neg, form: RepulsiveForm) -> np.ndarray:
    v = form.variant
    finite_R = np.isfinite(R)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if v is Variant.NONE:
            return np.zeros_like(R)
        if v is Variant.EXP_RATIO:
            return np.where(finite_R, np.exp(-np.where(finite_R, R, 0.0)), 0.0)
        if v is Variant.HINGE_RATIO:
            return np.where(finite_R, np.maximum(0.0, 1.0 - np.where(finite_R, R, 0.0)), 0.0)
        d_neg_b = np.broadcast_to(d_neg, R.shape)
        finite_neg = np.isfinite(d_neg_b)
        if v is Variant.INVERSE_NEG_DIST:
            return np.where(finite_neg, 1.0 / (np.where(finite_neg, d_neg_b, 0.0) + form.epsilon), 0.0)
        if v is Variant.NORMALIZED_POS_DIST:
            ok = finite_neg & (d_pos != 0.0)
            return np.where(ok, d_pos / np.where(ok, d_pos + d_neg_b, 1.0), 0.0)
    raise ValueError(f"unknown repulsive form {v!r}")


def cost_matrices(preds: Sequence[Prediction], scene_or_positives, w: CostWeights, form: RepulsiveForm,
                  negatives=None) -> tuple[np.ndarray, np.ndarray]:
    """Full ``(n_preds, n_pos)`` matching-cost matrix and the matching ambiguity-ratio matrix."""
    if isinstance(scene_or_positives, Scene):
        positives, negatives = scene_or_positives.positives, scene_or_positives.negatives
    else:
        positives = scene_or_positives
    P = points_array([p.point for p in preds])
    G = points_array(positives)
    N = points_array(negatives if negatives is not None else [])
    scores = np.array([p.cls_score for p in preds], dtype=np.float64)

    diff = P[:, None, :] - G[None, :, :]
    l1 = np.abs(diff).sum(axis=-1)
    d_pos = np.hypot(diff[..., 0], diff[..., 1])
    if len(N):
        nd = P[:, None, :] - N[None, :, :]
        d_neg = np.hypot(nd[..., 0], nd[..., 1]).min(axis=1)[:, None]
    else:
        d_neg = np.full((len(P), 1), INF)
    with np.errstate(divide="ignore", invalid="ignore"):
        R = np.where(np.isinf(d_neg) | (d_pos == 0.0), INF, d_neg / np.where(d_pos == 0.0, 1.0, d_pos))
    c_rep = _repulsive_matrix(R, d_pos, d_neg, form)
    cost = w.lambda_cls * (1.0 - scores)[:, None] + w.lambda_l1 * l1 + w.lambda_rep * c_rep
    return cost, R


# --- assignment engine --------------------------------------------------------

def _hungarian(a: np.ndarray):
    """Shortest augmenting path Hungarian algorithm for ``n <= m``.

    Every row is matched. Returns ``(col_of_row, u, v)`` where ``u``/``v`` are
    optimal duals: ``a[i, j] - u[i] - v[j] >= 0`` with equality on matched
    pairs, and ``v[j] = 0`` on unmatched columns.
    """
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    A = np.zeros((n + 1, m + 1))  # 1-based with a dummy row/column 0
    A[1:, 1:] = a
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = A[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, INF)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    matched = np.flatnonzero(p[1:]) + 1
    col_of_row[p[matched] - 1] = matched - 1
    return col_of_row, u[1:], v[1:]


def _solve_rect(cost: np.ndarray):
    """Optimal pairs of a rectangular matrix; surplus rows/columns stay unmatched.

    Returns ``(pairs, total, reduced_costs)``.
    """
    n, m = cost.shape
    if n == 0 or m == 0:
        return [], 0.0, np.zeros((n, m))
    if n <= m:
        col_of_row, u, v = _hungarian(cost)
        pairs = [(i, int(col_of_row[i])) for i in range(n)]
        reduced = cost - u[:, None] - v[None, :]
    else:
        row_of_col, u, v = _hungarian(cost.T)
        pairs = sorted((int(row_of_col[j]), j) for j in range(m))
        reduced = cost - v[:, None] - u[None, :]
    total = math.fsum(cost[i, j] for i, j in pairs)
    return pairs, total, reduced


def _tolerance(cost: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(cost)))) if cost.size else 1.0
    return 1e-12 * scale * max(cost.shape + (1,))


def solve_assignment(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of a real ``(n, m)`` matrix.

    Among (numerically) equal-cost optima the lexicographically smallest pair
    sequence wins, so results depend only on the matrix and its ordering.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError("cost matrix must be two-dimensional")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    n, m = cost.shape
    pairs, total, reduced = _solve_rect(cost)
    tol = _tolerance(cost)
    rc_tol = 1e-9 * max(1.0, float(np.max(np.abs(cost)))) if cost.size else 0.0

    current = dict(pairs)
    free_cols = list(range(m))
    fixed = []
    fixed_cost = 0.0
    for i in range(n):
        if not free_cols:
            break
        rest_rows = list(range(i + 1, n))
        limit = current.get(i, m)
        chosen = current.get(i)
        for j in free_cols:
            if j >= limit:
                break
            if reduced[i, j] > rc_tol:
                continue
            cols = [c for c in free_cols if c != j]
            sub = cost[np.ix_(rest_rows, cols)]
            sub_pairs, sub_total, _ = _solve_rect(sub)
            if fixed_cost + cost[i, j] + sub_total <= total + tol:
                chosen = j
                current = {rest_rows[a]: cols[b] for a, b in sub_pairs}
                break
        if chosen is not None:
            fixed.append((i, chosen))
            fixed_cost += cost[i, chosen]
            free_cols.remove(chosen)

    pair_costs = tuple(float(cost[i, j]) for i, j in fixed)
    return Assignment(tuple(fixed), math.fsum(pair_costs), pair_costs)


def assign(preds: Sequence[Prediction], scene: Scene, w: CostWeights, form: RepulsiveForm) -> Assignment:
    if len(preds) == 0:
        raise MatchingError("cannot assign: no predictions")
    if len(scene.positives) == 0:
        raise MatchingError("cannot assign: scene has no positive points")
    cost, R = cost_matrices(preds, scene, w, form)
    result = solve_assignment(cost)
    ratios = tuple(float(R[i, j]) for i, j in result.pairs)
    return Assignment(result.pairs, result.total_cost, result.pair_costs, ratios)


@functools.lru_cache(maxsize=None)
def _permutations(n: int, k: int) -> np.ndarray:
    perms = np.array(list(itertools.permutations(range(n), k)), dtype=np.int64)
    perms.flags.writeable = False
    return perms


def oracle_assign(cost_matrix) -> Assignment:
    """Exhaustive minimum over every injective mapping; for testing only (n, m <= 8)."""
    cost = np.asarray(cost_matrix, dtype=np.float64)
    n, m = cost.shape
    if n > 8 or m > 8:
        raise MatchingError("oracle_assign is limited to matrices of at most 8x8")
    if n == 0 or m == 0:
        return Assignment((), 0.0, ())
    if n <= m:
        perms = _permutations(m, n)
        totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    else:
        perms = _permutations(n, m)
        totals = cost[perms, np.arange(m)[None, :]].sum(axis=1)
    best = totals.min()
    winners = perms[totals <= best + _tolerance(cost)]
    if n <= m:
        candidates = [[(i, int(c)) for i, c in enumerate(perm)] for perm in winners]
    else:
        candidates = [sorted((int(r), j) for j, r in enumerate(perm)) for perm in winners]
    pairs = min(candidates)
    pair_costs = tuple(float(cost[i, j]) for i, j in pairs)
    return Assignment(tuple(pairs), math.fsum(pair_costs), pair_costs)
