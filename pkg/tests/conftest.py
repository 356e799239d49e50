import numpy as np
import pytest

from w2lab.model import FeatureGrid, Point2, Prediction, Scene, TokenSet


def make_scene(positives, negatives=(), channels=4, height=4, width=4, seed=0, scene_id="s"):
    rng = np.random.default_rng(seed)
    grid = FeatureGrid(height, width, channels, rng.normal(size=(height, width, channels)))
    tokens = rng.normal(size=(3, channels))
    text = TokenSet(tokens, (0, 1, 0), 0)
    return Scene(grid, text, tuple(positives), tuple(negatives), scene_id)


def preds_at(points, score=1.0):
    return [Prediction(Point2(*p), score, score) for p in points]


@pytest.fixture
def scene_factory():
    return make_scene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
