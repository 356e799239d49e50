import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from w2lab.losses import (LossConfig, LossError, classification_loss, focal_loss_and_grad, focal_term, gradcheck,
                          localization_loss, positive_labels, total_loss)
from w2lab.matching import Assignment, solve_assignment
from w2lab.model import Point2, Prediction, TokenSet

ONE_TOKEN = TokenSet(np.ones((1, 2)), (0,), 0)


def single(i=0, j=0):
    return Assignment(((i, j),), 0.0, (0.0,))


def test_focal_worked_examples():
    assert focal_term(0.5, 1, 2.0, 0.25) == pytest.approx(0.043322, abs=1e-6)
    assert focal_term(0.5, 0, 2.0, 0.25) == pytest.approx(0.129966, abs=1e-6)
    assert focal_term(0.5, 1) == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(s=st.floats(1e-6, 1 - 1e-6), y=st.sampled_from([0, 1]), alpha=st.floats(0.01, 0.99))
def test_gamma_zero_is_weighted_cross_entropy(s, y, alpha):
    expected = -alpha * math.log(s) if y else -(1 - alpha) * math.log(1 - s)
    assert focal_term(s, y, 0.0, alpha) == pytest.approx(expected, rel=1e-14, abs=1e-300)


def test_scores_are_clamped_at_saturation():
    assert math.isfinite(focal_term(0.0, 1))
    assert math.isfinite(focal_term(1.0, 0))
    assert focal_term(1.0, 1) == pytest.approx(0.0, abs=1e-12)
    _, g = focal_loss_and_grad(np.array([0.0, 1.0]), np.array([1, 0]))
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_positive_loss_decreases_in_score():
    s = np.linspace(0.01, 0.99, 99)
    loss, grad = focal_loss_and_grad(s, np.ones_like(s))
    assert np.all(np.diff(loss) < 0) and np.all(grad < 0)


def test_classification_loss_single_pair():
    loss, grad = classification_loss([[0.5]], single(), ONE_TOKEN)
    assert loss == pytest.approx(0.043322, abs=1e-6)
    assert grad.shape == (1, 1)


def test_classification_loss_near_perfect_is_small():
    text = TokenSet(np.eye(3), (0, 1, 0), 0)
    scores = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    loss, _ = classification_loss(scores, single(0, 0), text)
    assert loss < 1e-6


def test_labels_cover_attribute_and_cls_tokens():
    text = TokenSet(np.eye(4), (0, 1, 0, 1), 2)
    np.testing.assert_array_equal(positive_labels(text), [0, 1, 1, 1])
    np.testing.assert_array_equal(positive_labels(text, label_all_tokens=True), [1, 1, 1, 1])


def test_empty_assignment_is_an_error():
    empty = Assignment((), 0.0, ())
    with pytest.raises(LossError, match="no positive matches"):
        classification_loss([[0.5]], empty, ONE_TOKEN)
    with pytest.raises(LossError):
        localization_loss([(0.1, 0.1)], [(0.2, 0.2)], empty)


def test_localization_loss_examples():
    preds = [Prediction(Point2(0.2, 0.2), 0.9, 0.9)]
    loss, grad = localization_loss(preds, [(0.3, 0.2)], single())
    assert loss == pytest.approx(0.1, abs=1e-15)
    np.testing.assert_array_equal(grad, [[-1.0, 0.0]])
    loss, grad = localization_loss([(0.3, 0.2)], [(0.3, 0.2)], single())
    assert loss == 0.0
    np.testing.assert_array_equal(grad, [[0.0, 0.0]])


def test_total_loss_is_weighted_sum(rng):
    text = TokenSet(rng.normal(size=(3, 4)), (0, 1, 0), 0)
    scores = rng.uniform(0.05, 0.95, size=(5, 3))
    points = rng.uniform(size=(5, 2))
    gts = rng.uniform(size=(2, 2))
    a = solve_assignment(rng.uniform(size=(5, 2)))
    cfg = LossConfig()
    report = total_loss(scores, points, gts, a, text, cfg)
    assert report.total == 5 * report.cls + 1 * report.loc
    assert report.n_pos == 2
    assert report.grad_scores.shape == (5, 3) and report.grad_points.shape == (2, 2)
    assert report.cls >= 0 and report.loc >= 0


def test_total_loss_arithmetic():
    cfg = LossConfig()
    assert cfg.lambda_cls * 0.1 + cfg.lambda_loc * 0.2 == pytest.approx(0.7)
    text = TokenSet(np.eye(2), (0, 1), 0)
    perfect = total_loss(np.array([[1.0, 1.0]]), [(0.5, 0.5)], [(0.5, 0.5)], single(), text, cfg)
    assert perfect.total == pytest.approx(0.0, abs=1e-12)


def test_normalization_by_matched_count():
    text = TokenSet(np.eye(2), (0, 1), 0)
    one = classification_loss(np.array([[0.7, 0.6]]), single(), text)[0]
    two = classification_loss(np.array([[0.7, 0.6], [0.7, 0.6]]),
                              Assignment(((0, 0), (1, 1)), 0.0, (0.0, 0.0)), text)[0]
    assert two == pytest.approx(one, rel=1e-15)
    loc_one = localization_loss([(0.1, 0.2)], [(0.3, 0.5)], single())[0]
    loc_two = localization_loss([(0.1, 0.2), (0.1, 0.2)], [(0.3, 0.5), (0.3, 0.5)],
                                Assignment(((0, 0), (1, 1)), 0.0, (0.0, 0.0)))[0]
    assert loc_two == pytest.approx(loc_one, rel=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=1.0)
    with pytest.raises(ValueError):
        LossConfig(gamma=-1)


def central_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (f(up) - f(dn)) / (2 * h)
    return g


@pytest.mark.parametrize("gamma,alpha", [(2.0, 0.25), (0.0, 0.5), (0.5, 0.9), (3.0, 0.1)])
def test_classification_gradient_against_finite_differences(rng, gamma, alpha):
    cfg = LossConfig(gamma=gamma, alpha=alpha)
    text = TokenSet(rng.normal(size=(4, 3)), (0, 1, 1, 0), 3)
    for _ in range(10):
        scores = rng.uniform(0.02, 0.98, size=(6, 4))
        a = solve_assignment(rng.uniform(size=(6, 3)))
        _, g = classification_loss(scores, a, text, cfg)
        num = central_difference(lambda s: classification_loss(s, a, text, cfg)[0], scores)
        np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-9)


def test_gradcheck_helper_passes():
    worst = gradcheck(n_instances=20, seed=3)
    assert set(worst) == {"classification_loss", "localization_loss"}
    assert all(v < 1e-4 for v in worst.values())
