"""Dual-stream query decoder (forward pass only, randomly initialized weights).

Two query streams run side by side through every layer:

* the *w2c* ("what to count") stream attends to the full text and samples the
  image around its reference points;
* the *w2s* ("where to see") stream does the same but with non-attribute
  tokens zeroed out, and never reads the w2c stream.

After each layer the w2s output is added into the w2c stream before a fusion
FFN, the w2s stream passes through its own FFN, and two separate linear heads
shift both sets of reference points.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import FeatureGrid, Point2, Prediction, Scene, TokenSet

__all__ = [
    "DecoderConfig",
    "DecoderError",
    "QueryState",
    "DecoderTrace",
    "DecoderWeights",
    "build_weights",
    "cross_modal_similarity",
    "init_queries",
    "text_cross_attention",
    "bilinear_sample",
    "deformable_attention",
    "refine_stream",
    "decoder_layer",
    "prediction_heads",
    "forward",
    "filter_predictions",
]


class DecoderError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    num_queries: int = 16
    channels: int = 16
    num_layers: int = 6
    num_heads: int = 2
    num_sampling_points: int = 4
    seed: int = 0
    ffn_dim: int | None = None  # defaults to 2 * channels
    offset_scale: float = 0.02  # std of reference-point offsets per layer, normalized units

    def __post_init__(self):
        for name in ("num_queries", "channels", "num_heads", "num_sampling_points"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.channels % self.num_heads:
            raise ValueError("channels must be divisible by num_heads")

    @property
    def hidden(self) -> int:
        return self.ffn_dim or 2 * self.channels

    @classmethod
    def from_json(cls, path) -> "DecoderConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class QueryState:
    w2c_content: np.ndarray  # (K, C)
    w2c_points: np.ndarray  # (K, 2) normalized (x, y)
    w2s_content: np.ndarray
    w2s_points: np.ndarray
    layer: int = 0

    def __post_init__(self):
        for name in ("w2c_content", "w2c_points", "w2s_content", "w2s_points"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def replace(self, **changes) -> "QueryState":
        fields = dict(w2c_content=self.w2c_content, w2c_points=self.w2c_points,
                      w2s_content=self.w2s_content, w2s_points=self.w2s_points, layer=self.layer)
        fields.update(changes)
        return QueryState(**fields)

    def bit_equal(self, other: "QueryState") -> bool:
        return self.layer == other.layer and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("w2c_content", "w2c_points", "w2s_content", "w2s_points")
        )


@dataclass(frozen=True)
class DecoderTrace:
    states: tuple  # QueryState per layer, 0..L
    predictions: tuple

    def to_dict(self, scene_id: str = "") -> dict:
        return {
            "id": scene_id,
            "layers": [
                {
                    "layer": s.layer,
                    "w2c_points": s.w2c_points.tolist(),
                    "w2s_points": s.w2s_points.tolist(),
                }
                for s in self.states
            ],
            "predictions": [
                {"point": list(p.point), "cls_score": p.cls_score, "attr_score": p.attr_score,
                 "per_token_scores": list(p.per_token_scores or ())}
                for p in self.predictions
            ],
        }


# --- parameters -----------------------------------------------------------------

def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@dataclass(frozen=True, eq=False)
class FFN:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        return _layer_norm(x + h @ self.w2 + self.b2)


@dataclass(frozen=True, eq=False)
class CrossAttnParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass(frozen=True, eq=False)
class DeformParams:
    w_offset: np.ndarray  # (C, H*S*2)
    b_offset: np.ndarray
    w_weight: np.ndarray  # (C, H*S)
    b_weight: np.ndarray
    w_value: np.ndarray  # (C, C)
    w_out: np.ndarray


@dataclass(frozen=True, eq=False)
class StreamParams:
    cross: CrossAttnParams
    deform: DeformParams
    ffn: FFN
    w_loc: np.ndarray  # (C, 2)
    b_loc: np.ndarray


@dataclass(frozen=True, eq=False)
class LayerParams:
    w2c: StreamParams
    w2s: StreamParams
    ffn_fuse: FFN
    ffn_ind: FFN


@dataclass(frozen=True, eq=False)
class DecoderWeights:
    init_content: np.ndarray  # (K, C)
    layers: tuple = field(default=())


def _dense(rng, n_in, n_out, scale=1.0):
    return rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out))


def _ffn(rng, c, hidden):
    return FFN(_dense(rng, c, hidden), np.zeros(hidden), _dense(rng, hidden, c), np.zeros(c))


def _stream(rng, cfg: DecoderConfig) -> StreamParams:
    C, H, S = cfg.channels, cfg.num_heads, cfg.num_sampling_points
    cross = CrossAttnParams(*(_dense(rng, C, C) for _ in range(4)))
    # sampling offsets start on a ring around the reference point, one direction per head
    angles = np.arange(H) * (2 * np.pi / H)
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (H, 2)
    b_offset = (ring[:, None, :] * np.arange(1, S + 1)[None, :, None]).reshape(-1) * 0.5
    deform = DeformParams(
        w_offset=_dense(rng, C, H * S * 2, 0.1),
        b_offset=b_offset,
        w_weight=_dense(rng, C, H * S),
        b_weight=np.zeros(H * S),
        w_value=_dense(rng, C, C),
        w_out=_dense(rng, C, C),
    )
    return StreamParams(
        cross=cross,
        deform=deform,
        ffn=_ffn(rng, C, cfg.hidden),
        w_loc=rng.normal(0.0, cfg.offset_scale / np.sqrt(C), size=(C, 2)),
        b_loc=np.zeros(2),
    )


def build_weights(cfg: DecoderConfig) -> DecoderWeights:
    """Draw every parameter from ``cfg.seed``; layers share nothing."""
    rng = np.random.default_rng(cfg.seed)
    init_content = rng.normal(size=(cfg.num_queries, cfg.channels))
    layers = tuple(
        LayerParams(
            w2c=_stream(rng, cfg),
            w2s=_stream(rng, cfg),
            ffn_fuse=_ffn(rng, cfg.channels, cfg.hidden),
            ffn_ind=_ffn(rng, cfg.channels, cfg.hidden),
        )
        for _ in range(cfg.num_layers)
    )
    return DecoderWeights(init_content, layers)


# --- building blocks --------------------------------------------------------------

def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def cross_modal_similarity(grid: FeatureGrid, text: TokenSet) -> np.ndarray:
    """Per-cell max cosine similarity against every text token, shape ``(height*width,)``."""
    return (_unit_rows(grid.flat_features()) @ _unit_rows(text.tokens).T).max(axis=1)


def init_queries(scene: Scene, cfg: DecoderConfig, weights: DecoderWeights | None = None) -> QueryState:
    """Place K query pairs at the top-K most text-similar grid cells (lower index wins ties)."""
    K = cfg.num_queries
    if scene.grid.num_cells < K:
        raise DecoderError(f"grid has {scene.grid.num_cells} cells, fewer than {K} queries")
    if scene.grid.channels != cfg.channels:
        raise DecoderError(f"scene has {scene.grid.channels} channels, decoder expects {cfg.channels}")
    weights = weights or build_weights(cfg)
    sim = cross_modal_similarity(scene.grid, scene.text)
    top = np.argsort(-sim, kind="stable")[:K]
    points = scene.grid.cell_centers()[top]
    content = weights.init_content
    return QueryState(content, points, content.copy(), points.copy(), 0)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def text_cross_attention(queries: np.ndarray, text: TokenSet, masked: bool,
                         params: CrossAttnParams, num_heads: int) -> np.ndarray:
    """Multi-head attention of queries over text tokens.

    With ``masked`` the keys and values come from the tokens with every
    non-attribute row set to zero; zeroed keys still receive softmax weight.
    """
    tokens = text.tokens
    if masked:
        tokens = np.where(text.mask_array[:, None] > 0, tokens, 0.0)
    K, C = queries.shape
    d = C // num_heads
    q = (queries @ params.wq).reshape(K, num_heads, d)
    k = (tokens @ params.wk).reshape(-1, num_heads, d)
    v = (tokens @ params.wv).reshape(-1, num_heads, d)
    attn = _softmax(np.einsum("khd,nhd->khn", q, k) / np.sqrt(d), axis=-1)
    out = np.einsum("khn,nhd->khd", attn, v).reshape(K, C)
    return out @ params.wo


def bilinear_sample(values: np.ndarray, locs: np.ndarray) -> np.ndarray:
    """Sample an ``(H, W, C)`` field at normalized ``(x, y)`` locations.

    Cell ``(r, c)`` is centered at ``((c + 0.5) / W, (r + 0.5) / H)``;
    locations outside the cell-center hull clamp to the border cells.
    """
    Hg, Wg = values.shape[:2]
    locs = np.asarray(locs, dtype=np.float64)
    px = np.clip(locs[..., 0] * Wg - 0.5, 0.0, Wg - 1)
    py = np.clip(locs[..., 1] * Hg - 0.5, 0.0, Hg - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, Wg - 1)
    y1 = np.minimum(y0 + 1, Hg - 1)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    top = values[y0, x0] * (1 - fx) + values[y0, x1] * fx
    bottom = values[y1, x0] * (1 - fx) + values[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _sampling(queries, points, grid: FeatureGrid, params: DeformParams, cfg: DecoderConfig):
    K = queries.shape[0]
    H, S = cfg.num_heads, cfg.num_sampling_points
    offsets = (queries @ params.w_offset + params.b_offset).reshape(K, H, S, 2)
    # offsets are expressed in grid cells
    offsets = offsets / np.array([grid.width, grid.height], dtype=np.float64)
    locs = np.clip(np.asarray(points)[:, None, None, :] + offsets, 0.0, 1.0)
    weights = _softmax((queries @ params.w_weight + params.b_weight).reshape(K, H, S), axis=-1)
    return locs, weights


def deform_aggregate(values: np.ndarray, locs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of per-head bilinear samples, heads concatenated: ``(K, C)``.

    ``values`` is ``(Hg, Wg, C)``; head ``h`` reads channel slice ``h``.
    ``locs`` is ``(K, H, S, 2)`` and ``weights`` ``(K, H, S)``.
    """
    K, H, S, _ = locs.shape
    C = values.shape[-1]
    d = C // H
    out = np.empty((K, H, d))
    for h in range(H):
        samples = bilinear_sample(values[..., h * d:(h + 1) * d], locs[:, h])  # (K, S, d)
        out[:, h] = np.einsum("ks,ksd->kd", weights[:, h], samples)
    return out.reshape(K, C)


def deformable_attention(queries: np.ndarray, points: np.ndarray, grid: FeatureGrid,
                         params: DeformParams, cfg: DecoderConfig) -> np.ndarray:
    values = grid.data @ params.w_value
    locs, weights = _sampling(queries, points, grid, params, cfg)
    return deform_aggregate(values, locs, weights) @ params.w_out


def refine_stream(content: np.ndarray, points: np.ndarray, scene: Scene, params: StreamParams,
                  cfg: DecoderConfig, masked: bool) -> np.ndarray:
    """Text attention, then image sampling, then the stream FFN: the refined queries."""
    txt = _layer_norm(content + text_cross_attention(content, scene.text, masked, params.cross, cfg.num_heads))
    img = _layer_norm(txt + deformable_attention(txt, points, scene.grid, params.deform, cfg))
    return params.ffn(img)


def decoder_layer(state: QueryState, scene: Scene, cfg: DecoderConfig, params: LayerParams,
                  zero_w2s_hat: bool = False) -> QueryState:
    """Advance both streams by one layer.

    ``zero_w2s_hat`` replaces the refined w2s queries with zeros in the fusion
    step only (a test hook); the w2s stream itself is unaffected.
    """
    if state.layer >= cfg.num_layers:
        raise DecoderError("state is already past the last layer")
    hat_c = refine_stream(state.w2c_content, state.w2c_points, scene, params.w2c, cfg, masked=False)
    hat_s = refine_stream(state.w2s_content, state.w2s_points, scene, params.w2s, cfg, masked=True)

    fused = hat_c + (np.zeros_like(hat_s) if zero_w2s_hat else hat_s)
    next_c = params.ffn_fuse(fused)
    next_s = params.ffn_ind(hat_s)

    step_c = next_c @ params.w2c.w_loc + params.w2c.b_loc
    step_s = next_s @ params.w2s.w_loc + params.w2s.b_loc
    return QueryState(
        w2c_content=next_c,
        w2c_points=np.clip(state.w2c_points + step_c, 0.0, 1.0),
        w2s_content=next_s,
        w2s_points=np.clip(state.w2s_points + step_s, 0.0, 1.0),
        layer=state.layer + 1,
    )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def prediction_heads(state: QueryState, text: TokenSet) -> list[Prediction]:
    """Point = w2c reference point; scores = sigmoid of content/token cosine similarity.

    ``attr_score`` is the max over attribute tokens, falling back to the
    non-CLS tokens when no token is marked, and to the CLS score when the
    expression is a single token.
    """
    scores = _sigmoid(_unit_rows(state.w2c_content) @ _unit_rows(text.tokens).T)
    mask = np.asarray(text.attribute_mask, dtype=bool)
    if not mask.any():
        mask = np.ones(text.num_tokens, dtype=bool)
        mask[text.cls_index] = False
    preds = []
    for i in range(scores.shape[0]):
        cls_score = scores[i, text.cls_index]
        attr = scores[i, mask].max() if mask.any() else cls_score
        preds.append(Prediction(Point2(*state.w2c_points[i]), cls_score, attr, tuple(scores[i])))
    return preds


def forward(scene: Scene, cfg: DecoderConfig, weights: DecoderWeights | None = None) -> DecoderTrace:
    weights = weights or build_weights(cfg)
    state = init_queries(scene, cfg, weights)
    states = [state]
    for params in weights.layers[:cfg.num_layers]:
        state = decoder_layer(state, scene, cfg, params)
        states.append(state)
    return DecoderTrace(tuple(states), tuple(prediction_heads(state, scene.text)))


def filter_predictions(preds: Sequence[Prediction], cls_threshold: float = 0.25,
                       attr_threshold: float = 0.35) -> list[Prediction]:
    """Keep predictions whose CLS score and attribute score both exceed their thresholds."""
    if not (0 <= cls_threshold <= 1 and 0 <= attr_threshold <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    return [p for p in preds if p.cls_score > cls_threshold and p.attr_score > attr_threshold]
