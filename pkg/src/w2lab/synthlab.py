"""Synthetic scenes with detached attribute evidence, and the matching experiments run on them.

Each scene scatters target-subclass and sibling-subclass annotation points.
All of them carry the same class signature in the feature grid; the
subclass-specific attribute signature sits at ``point + attr_offset``, away
from the annotation point. Predictions for the matching experiments are
noisy copies of the annotation points: by default several per target and,
because the queries also fire on the look-alike siblings, several per
sibling too. With enough noise some predictions land closer to a sibling
than to the target they get matched to.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .matching import CostWeights, RepulsiveForm, Variant, assign
from .model import FeatureGrid, Point2, Prediction, Scene, TokenSet, points_array

__all__ = [
    "GeneratorConfig",
    "InfeasibleError",
    "AmbiguityResult",
    "AblationRow",
    "generate_scene",
    "perturb_predictions",
    "ambiguity_rate",
    "ambiguity_experiment",
    "repulsion_ablation",
    "default_matchers",
    "trajectory_drift",
]

MAX_TRIES_PER_POINT = 10_000
CLASS_CHANNEL, TARGET_ATTR_CHANNEL, SIBLING_ATTR_CHANNEL = 0, 1, 2


class InfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_pos: int = 25
    n_neg: int = 25
    min_separation: float = 0.05
    attr_offset: tuple = (0.0, 0.05)
    noise_sigma: float = 0.04
    grid_size: tuple = (16, 16)  # (height, width)
    channels: int = 16
    background_sigma: float = 0.05
    # prediction side of the matching experiments
    queries_per_point: int = 2
    distractor_queries: bool = True  # queries also fire on sibling-subclass objects
    score_range: tuple = (0.95, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_pos < 1 or self.n_neg < 0:
            raise ValueError("need n_pos >= 1 and n_neg >= 0")
        if not self.min_separation > 0:
            raise ValueError("min_separation must be positive")
        if self.noise_sigma < 0 or self.background_sigma < 0:
            raise ValueError("noise scales must be >= 0")
        if self.channels < 3:
            raise ValueError("need at least 3 channels for class and two attribute signatures")
        if self.queries_per_point < 1:
            raise ValueError("queries_per_point must be >= 1")
        lo, hi = self.score_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("score_range must satisfy 0 <= low <= high <= 1")
        object.__setattr__(self, "score_range", (float(lo), float(hi)))
        object.__setattr__(self, "attr_offset", tuple(float(v) for v in self.attr_offset))
        object.__setattr__(self, "grid_size", tuple(int(v) for v in self.grid_size))

    def with_seed(self, seed: int) -> "GeneratorConfig":
        return GeneratorConfig(**{**asdict(self), "seed": seed})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratorConfig":
        return cls(**obj)


def _place_points(rng: np.random.Generator, n: int, min_sep: float) -> np.ndarray:
    placed = np.zeros((0, 2))
    for k in range(n):
        for _ in range(MAX_TRIES_PER_POINT):
            cand = rng.uniform(0.0, 1.0, size=2)
            if len(placed) == 0 or np.min(np.hypot(*(placed - cand).T)) >= min_sep:
                placed = np.vstack([placed, cand])
                break
        else:
            raise InfeasibleError(
                f"could not place point {k + 1} of {n} at separation {min_sep} "
                f"within {MAX_TRIES_PER_POINT} tries"
            )
    return placed


def _cell_of(p: np.ndarray, height: int, width: int) -> tuple[int, int]:
    return min(int(p[1] * height), height - 1), min(int(p[0] * width), width - 1)


def generate_scene(cfg: GeneratorConfig) -> tuple[Scene, tuple]:
    """Build a scene and return it with the attribute site of every annotation point.

    Sites are listed positives first, then negatives, matching the scene order.
    """
    rng = np.random.default_rng(cfg.seed)
    pts = _place_points(rng, cfg.n_pos + cfg.n_neg, cfg.min_separation)
    H, W = cfg.grid_size
    eye = np.eye(cfg.channels)
    data = rng.normal(0.0, cfg.background_sigma, size=(H, W, cfg.channels))
    sites = np.clip(pts + np.asarray(cfg.attr_offset), 0.0, 1.0)
    for k, (p, s) in enumerate(zip(pts, sites)):
        data[_cell_of(p, H, W)] += eye[CLASS_CHANNEL]
        attr = TARGET_ATTR_CHANNEL if k < cfg.n_pos else SIBLING_ATTR_CHANNEL
        data[_cell_of(s, H, W)] += eye[attr]
    text = TokenSet(eye[[CLASS_CHANNEL, TARGET_ATTR_CHANNEL]], (0, 1), 0)
    scene = Scene(
        grid=FeatureGrid(H, W, cfg.channels, data),
        text=text,
        positives=tuple(Point2(*p) for p in pts[:cfg.n_pos]),
        negatives=tuple(Point2(*p) for p in pts[cfg.n_pos:]),
        id=f"synth-{cfg.seed}",
    )
    return scene, tuple(Point2(*s) for s in sites)


def perturb_predictions(scene: Scene, noise_sigma: float, seed: int, per_point: int = 1,
                        include_negatives: bool = False, score_range=(0.5, 1.0)) -> list[Prediction]:
    """Noisy predictions around the annotation points, clamped to the unit square.

    By default there is one prediction per target point. ``include_negatives``
    also emits predictions around sibling-subclass points and ``per_point``
    repeats each source point; predictions are ordered by source point.
    """
    rng = np.random.default_rng(seed)
    src = list(scene.positives) + (list(scene.negatives) if include_negatives else [])
    P = np.repeat(points_array(src), per_point, axis=0)
    noisy = np.clip(P + rng.normal(0.0, noise_sigma, size=P.shape), 0.0, 1.0)
    cls_scores = rng.uniform(*score_range, size=len(P))
    attr_scores = rng.uniform(*score_range, size=len(P))
    return [Prediction(Point2(*p), c, a) for p, c, a in zip(noisy, cls_scores, attr_scores)]


def ambiguity_rate(assignment) -> float:
    """Fraction of matched pairs whose prediction is nearer a distractor than its target."""
    ratios = np.asarray(assignment.ambiguity_ratios, dtype=np.float64)
    return float(np.mean(ratios < 1.0)) if ratios.size else 0.0


def matcher_label(w: CostWeights, form: RepulsiveForm) -> str:
    return f"{form.variant.value}/lambda_rep={w.lambda_rep:g}"


def default_matchers(lambda_rep: float = 0.2, form: RepulsiveForm = RepulsiveForm(Variant.EXP_RATIO)):
    """Standard matching baseline followed by the repulsive matcher."""
    return [
        (CostWeights(5.0, 1.0, 0.0), RepulsiveForm(Variant.NONE)),
        (CostWeights(5.0, 1.0, lambda_rep), form),
    ]


@dataclass(frozen=True)
class AmbiguityResult:
    labels: tuple
    seeds: tuple
    rates: np.ndarray = field(repr=False)  # (n_seeds, n_matchers)

    @property
    def mean(self) -> np.ndarray:
        return self.rates.mean(axis=0)

    @property
    def spread(self) -> np.ndarray:
        return self.rates.std(axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["seed", "matcher", "ambiguity_rate"])
        for k, label in enumerate(self.labels):
            for s, seed in enumerate(self.seeds):
                writer.writerow([seed, label, repr(float(self.rates[s, k]))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            label: {"mean": float(m), "spread": float(sd)}
            for label, m, sd in zip(self.labels, self.mean, self.spread)
        }


def _seed_trial(args) -> list[float]:
    gen, matchers = args
    scene, _ = generate_scene(gen)
    preds = perturb_predictions(scene, gen.noise_sigma, seed=gen.seed + 1_000_003,
                                per_point=gen.queries_per_point,
                                include_negatives=gen.distractor_queries,
                                score_range=gen.score_range)
    return [ambiguity_rate(assign(preds, scene, w, form)) for w, form in matchers]


def ambiguity_experiment(gen: GeneratorConfig, matchers, n_seeds: int, jobs: int = 1) -> AmbiguityResult:
    """Ambiguity rate per seed for each matcher; seeds are ``gen.seed .. gen.seed + n_seeds - 1``."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    matchers = list(matchers)
    seeds = [gen.seed + s for s in range(n_seeds)]
    tasks = [(gen.with_seed(seed), matchers) for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_seed_trial, tasks))
    else:
        rows = [_seed_trial(t) for t in tasks]
    labels = tuple(matcher_label(w, f) for w, f in matchers)
    return AmbiguityResult(labels, tuple(seeds), np.asarray(rows, dtype=np.float64).reshape(n_seeds, len(matchers)))


EXPRESSIONS = {
    Variant.NONE: "N/A",
    Variant.INVERSE_NEG_DIST: "1/(d_neg+eps)",
    Variant.NORMALIZED_POS_DIST: "d_pos/(d_pos+d_neg)",
    Variant.HINGE_RATIO: "max(0,1-R)",
    Variant.EXP_RATIO: "exp(-R)",
}


@dataclass(frozen=True)
class AblationRow:
    formulation: str
    expression: str
    mean_rate: float
    spread: float


@dataclass(frozen=True)
class AblationTable:
    rows: tuple
    lambda_rep: float
    n_seeds: int

    @property
    def exp_is_best(self) -> bool:
        exp = self.row(Variant.EXP_RATIO)
        return all(exp.mean_rate <= r.mean_rate for r in self.rows)

    def row(self, variant: Variant) -> AblationRow:
        label = RepulsiveForm(variant).label
        return next(r for r in self.rows if r.formulation == label)

    def note(self) -> str:
        if self.exp_is_best:
            return "exp(-R) has the lowest mean ambiguity rate"
        best = min(self.rows, key=lambda r: r.mean_rate)
        return (f"deviation: {best.formulation} has a lower mean ambiguity rate "
                f"({best.mean_rate:.4f}) than exp(-R) ({self.row(Variant.EXP_RATIO).mean_rate:.4f})")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["formulation", "expression", "mean_rate", "spread"])
        for r in self.rows:
            writer.writerow([r.formulation, r.expression, repr(r.mean_rate), repr(r.spread)])
        writer.writerow([f"# {self.note()}"])
        return buf.getvalue()

    def format(self) -> str:
        lines = [f"{'Formulation':<30} {'Expression':<20} {'mean rate':>10} {'spread':>10}"]
        for r in self.rows:
            lines.append(f"{r.formulation:<30} {r.expression:<20} {r.mean_rate:>10.4f} {r.spread:>10.4f}")
        lines.append(f"({self.n_seeds} seeds, lambda_rep={self.lambda_rep:g}) {self.note()}")
        return "\n".join(lines)


def repulsion_ablation(gen: GeneratorConfig, n_seeds: int, lambda_rep: float = 0.2,
                       forms: Sequence[RepulsiveForm] | None = None, jobs: int = 1) -> AblationTable:
    """Ambiguity rate of each repulsive formulation at one fixed repulsive weight."""
    forms = list(forms or RepulsiveForm.all())
    matchers = [(CostWeights(5.0, 1.0, lambda_rep), f) for f in forms]
    result = ambiguity_experiment(gen, matchers, n_seeds, jobs)
    rows = tuple(
        AblationRow(f.label, EXPRESSIONS[f.variant], float(m), float(sd))
        for f, m, sd in zip(forms, result.mean, result.spread)
    )
    return AblationTable(rows, lambda_rep, n_seeds)


def trajectory_drift(trace, scene: Scene, sites) -> dict:
    """Per-layer mean distance of each stream to the nearest target point and target attribute site."""
    targets = points_array(scene.positives)
    target_sites = points_array(sites)[: len(scene.positives)]

    def mean_nearest(points, refs):
        d = np.hypot(points[:, None, 0] - refs[None, :, 0], points[:, None, 1] - refs[None, :, 1])
        return float(d.min(axis=1).mean())

    out = {"w2c_to_points": [], "w2s_to_sites": [], "w2s_to_points": []}
    for state in trace.states:
        out["w2c_to_points"].append(mean_nearest(state.w2c_points, targets))
        out["w2s_to_sites"].append(mean_nearest(state.w2s_points, target_sites))
        out["w2s_to_points"].append(mean_nearest(state.w2s_points, targets))
    return out
