"""Domain types shared by every module, plus the JSON scene/prediction files.

All geometry lives in normalized image coordinates ``[0, 1]^2``. Value objects
are immutable; numpy arrays held by them are marked read-only.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Any, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Point2",
    "FeatureGrid",
    "TokenSet",
    "Scene",
    "Prediction",
    "SceneFormatError",
    "validate_scene",
    "load_scene",
    "save_scene",
    "load_predictions",
    "save_predictions",
    "scene_to_dict",
    "scene_from_dict",
    "predictions_to_list",
    "predictions_from_list",
    "points_array",
    "write_atomic",
]


class SceneFormatError(ValueError):
    """Raised when a scene or prediction file cannot be turned into valid objects.

    ``path`` is the JSON field path of the offending value, e.g. ``positives[1][0]``.
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class Point2(NamedTuple):
    x: float
    y: float

    def clamped(self) -> "Point2":
        return Point2(min(max(float(self.x), 0.0), 1.0), min(max(float(self.y), 0.0), 1.0))


def points_array(points) -> np.ndarray:
    """Stack a sequence of points (or an ``(n, 2)`` array) into a float64 ``(n, 2)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 2))
    return arr.reshape(-1, 2)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Image feature map of ``height x width`` cells with ``channels`` features each.

    ``data`` is stored with shape ``(height, width, channels)``; its row-major
    flattening is the on-disk layout.
    """

    height: int
    width: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))

    @classmethod
    def from_flat(cls, height: int, width: int, channels: int, flat) -> "FeatureGrid":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != height * width * channels:
            raise SceneFormatError(
                f"data length {flat.size} != height*width*channels = {height * width * channels}",
                "grid.data",
            )
        return cls(height, width, channels, flat.reshape(height, width, channels))

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def flat_features(self) -> np.ndarray:
        """Features as an ``(height*width, channels)`` matrix, cells in row-major order."""
        return self.data.reshape(-1, self.channels)

    def cell_centers(self) -> np.ndarray:
        """Normalized ``(x, y)`` centers of every cell, row-major, shape ``(M, 2)``."""
        rows, cols = np.divmod(np.arange(self.num_cells), self.width)
        return np.stack([(cols + 0.5) / self.width, (rows + 0.5) / self.height], axis=1)

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return (
            (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TokenSet:
    """Text token features ``(N, C)`` with the attribute mask and the CLS position."""

    tokens: np.ndarray
    attribute_mask: tuple
    cls_index: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim == 1:
            tokens = tokens.reshape(1, -1)
        object.__setattr__(self, "tokens", _frozen(tokens))
        object.__setattr__(self, "attribute_mask", tuple(int(m) for m in self.attribute_mask))
        object.__setattr__(self, "cls_index", int(self.cls_index))

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def mask_array(self) -> np.ndarray:
        return np.asarray(self.attribute_mask, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, TokenSet):
            return NotImplemented
        return (
            self.tokens.shape == other.tokens.shape
            and np.array_equal(self.tokens, other.tokens, equal_nan=True)
            and self.attribute_mask == other.attribute_mask
            and self.cls_index == other.cls_index
        )

    __hash__ = None


@dataclass(frozen=True)
class Scene:
    """One image/expression pair: features, text, and target/distractor annotations."""

    grid: FeatureGrid
    text: TokenSet
    positives: tuple
    negatives: tuple
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(Point2(float(x), float(y)) for x, y in self.positives))
        object.__setattr__(self, "negatives", tuple(Point2(float(x), float(y)) for x, y in self.negatives))

    __hash__ = None


@dataclass(frozen=True)
class Prediction:
    point: Point2
    cls_score: float
    attr_score: float
    per_token_scores: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "point", Point2(float(self.point[0]), float(self.point[1])))
        object.__setattr__(self, "cls_score", float(self.cls_score))
        object.__setattr__(self, "attr_score", float(self.attr_score))
        if self.per_token_scores is not None:
            object.__setattr__(self, "per_token_scores", tuple(float(s) for s in self.per_token_scores))


def _point_problems(p, where: str) -> list[str]:
    out = []
    if not all(math.isfinite(c) for c in p):
        out.append(f"{where}: non-finite coordinate")
    elif not all(0.0 <= c <= 1.0 for c in p):
        out.append(f"{where}: point out of range")
    return out


def validate_scene(scene: Scene) -> list[str]:
    """Return a description of every invariant violation; an empty list means valid."""
    problems = []
    g = scene.grid
    if min(g.height, g.width, g.channels) < 1:
        problems.append("grid: height, width and channels must be positive")
    if g.data.size != g.height * g.width * g.channels:
        problems.append("grid.data: length does not equal height*width*channels")
    if not np.all(np.isfinite(g.data)):
        problems.append("grid.data: non-finite entry")

    t = scene.text
    if t.num_tokens == 0 or t.tokens.size == 0:
        problems.append("text.tokens: empty token set")
    else:
        if t.tokens.shape[1] != g.channels:
            problems.append("text.tokens: token dimension differs from grid channels")
        if not np.all(np.isfinite(t.tokens)):
            problems.append("text.tokens: non-finite entry")
    if len(t.attribute_mask) != t.num_tokens:
        problems.append("text.attribute_mask: length differs from token count")
    if any(m not in (0, 1) for m in t.attribute_mask):
        problems.append("text.attribute_mask: entries must be 0 or 1")
    if not 0 <= t.cls_index < t.num_tokens:
        problems.append("text.cls_index: out of range")
    elif t.cls_index < len(t.attribute_mask) and t.attribute_mask[t.cls_index] != 0:
        problems.append("text.attribute_mask: CLS token must not be an attribute token")

    for name in ("positives", "negatives"):
        for i, p in enumerate(getattr(scene, name)):
            problems.extend(_point_problems(p, f"{name}[{i}]"))
    if set(scene.positives) & set(scene.negatives):
        problems.append("positives/negatives: positive/negative overlap")
    return problems


# --- JSON ---------------------------------------------------------------------

def _require(obj: dict, key: str, path: str):
    if not isinstance(obj, dict):
        raise SceneFormatError("expected an object", path)
    if key not in obj:
        raise SceneFormatError(f"missing required key '{key}'", f"{path}.{key}" if path else key)
    return obj[key]


def _real(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SceneFormatError("expected a number", path)
    return float(value)


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SceneFormatError("expected an integer", path)
    return value


def _point(value, path: str) -> Point2:
    if not isinstance(value, list) or len(value) != 2:
        raise SceneFormatError("expected [x, y]", path)
    x, y = _real(value[0], f"{path}[0]"), _real(value[1], f"{path}[1]")
    if not (math.isfinite(x) and math.isfinite(y)):
        raise SceneFormatError("non-finite coordinate", path)
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise SceneFormatError("point out of range", path)
    return Point2(x, y)


def _real_list(value, path: str) -> list[float]:
    if not isinstance(value, list):
        raise SceneFormatError("expected a list", path)
    return [_real(v, f"{path}[{i}]") for i, v in enumerate(value)]


def scene_to_dict(scene: Scene) -> dict[str, Any]:
    g, t = scene.grid, scene.text
    return {
        "id": scene.id,
        "grid": {
            "height": g.height,
            "width": g.width,
            "channels": g.channels,
            "data": g.data.ravel().tolist(),
        },
        "text": {
            "tokens": t.tokens.tolist(),
            "attribute_mask": list(t.attribute_mask),
            "cls_index": t.cls_index,
        },
        "positives": [[p.x, p.y] for p in scene.positives],
        "negatives": [[p.x, p.y] for p in scene.negatives],
    }


def scene_from_dict(obj) -> Scene:
    sid = _require(obj, "id", "")
    if not isinstance(sid, str):
        raise SceneFormatError("expected a string", "id")
    gobj = _require(obj, "grid", "")
    h = _int(_require(gobj, "height", "grid"), "grid.height")
    w = _int(_require(gobj, "width", "grid"), "grid.width")
    c = _int(_require(gobj, "channels", "grid"), "grid.channels")
    if min(h, w, c) < 1:
        raise SceneFormatError("grid dimensions must be positive", "grid")
    data = _real_list(_require(gobj, "data", "grid"), "grid.data")
    if not all(math.isfinite(v) for v in data):
        raise SceneFormatError("non-finite entry", "grid.data")
    grid = FeatureGrid.from_flat(h, w, c, data)

    tobj = _require(obj, "text", "")
    raw_tokens = _require(tobj, "tokens", "text")
    if not isinstance(raw_tokens, list) or not raw_tokens:
        raise SceneFormatError("expected a nonempty list of token vectors", "text.tokens")
    tokens = [_real_list(v, f"text.tokens[{i}]") for i, v in enumerate(raw_tokens)]
    for i, v in enumerate(tokens):
        if len(v) != c:
            raise SceneFormatError(f"token dimension {len(v)} != channels {c}", f"text.tokens[{i}]")
    mask = _require(tobj, "attribute_mask", "text")
    if not isinstance(mask, list):
        raise SceneFormatError("expected a list", "text.attribute_mask")
    mask = [_int(m, f"text.attribute_mask[{i}]") for i, m in enumerate(mask)]
    cls_index = _int(_require(tobj, "cls_index", "text"), "text.cls_index")
    text = TokenSet(np.asarray(tokens), tuple(mask), cls_index)

    pos = _require(obj, "positives", "")
    neg = _require(obj, "negatives", "")
    for name, val in (("positives", pos), ("negatives", neg)):
        if not isinstance(val, list):
            raise SceneFormatError("expected a list of points", name)
    scene = Scene(
        grid=grid,
        text=text,
        positives=tuple(_point(p, f"positives[{i}]") for i, p in enumerate(pos)),
        negatives=tuple(_point(p, f"negatives[{i}]") for i, p in enumerate(neg)),
        id=sid,
    )
    problems = validate_scene(scene)
    if problems:
        raise SceneFormatError("; ".join(problems))
    return scene


def predictions_to_list(preds: Sequence[Prediction]) -> list[dict[str, Any]]:
    out = []
    for p in preds:
        d = {"point": [p.point.x, p.point.y], "cls_score": p.cls_score, "attr_score": p.attr_score}
        if p.per_token_scores is not None:
            d["per_token_scores"] = list(p.per_token_scores)
        out.append(d)
    return out


def _score(value, path: str) -> float:
    s = _real(value, path)
    if not 0.0 <= s <= 1.0:
        raise SceneFormatError("score outside [0, 1]", path)
    return s


def predictions_from_list(obj) -> list[Prediction]:
    if not isinstance(obj, list):
        raise SceneFormatError("expected a list of predictions", "")
    preds = []
    for i, d in enumerate(obj):
        path = f"[{i}]"
        point = _point(_require(d, "point", path), f"{path}.point")
        cls_score = _score(_require(d, "cls_score", path), f"{path}.cls_score")
        attr_score = _score(_require(d, "attr_score", path), f"{path}.attr_score")
        pts = d.get("per_token_scores")
        if pts is not None:
            if not isinstance(pts, list):
                raise SceneFormatError("expected a list", f"{path}.per_token_scores")
            pts = tuple(_score(s, f"{path}.per_token_scores[{j}]") for j, s in enumerate(pts))
        preds.append(Prediction(point, cls_score, attr_score, pts))
    return preds


def dumps(obj) -> str:
    # float repr is the shortest string that round-trips exactly (up to 17 significant digits).
    return json.dumps(obj, allow_nan=True, indent=None)


def write_atomic(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and an atomic rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"parse failure: {exc.msg} at line {exc.lineno} column {exc.colno}") from exc


def load_scene(path) -> Scene:
    return scene_from_dict(_read_json(path))


def save_scene(scene: Scene, path) -> None:
    write_atomic(path, dumps(scene_to_dict(scene)) + "\n")


def load_predictions(path) -> list[Prediction]:
    return predictions_from_list(_read_json(path))


def save_predictions(preds: Sequence[Prediction], path) -> None:
    write_atomic(path, dumps(predictions_to_list(preds)) + "\n")
