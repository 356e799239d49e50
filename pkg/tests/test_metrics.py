import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from w2lab.metrics import MetricsReport, counting_errors, evaluate, localize_match, prf1


def exhaustive_match(gt, preds, tau):
    """Max cardinality, then min total distance, by enumerating every injective map."""
    gt, preds = np.asarray(gt, float).reshape(-1, 2), np.asarray(preds, float).reshape(-1, 2)
    if len(gt) == 0 or len(preds) == 0:
        return 0, 0.0
    d = np.linalg.norm(preds[:, None] - gt[None], axis=-1)
    best = (0, 0.0)
    small, large = (len(preds), len(gt)) if len(preds) <= len(gt) else (len(gt), len(preds))
    for perm in itertools.permutations(range(large), small):
        pairs = [(i, p) for i, p in enumerate(perm)] if len(preds) <= len(gt) else [(p, j) for j, p in enumerate(perm)]
        ok = [d[i, j] for i, j in pairs if d[i, j] <= tau]
        cand = (len(ok), sum(ok))
        if cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
            best = cand
    return best


def test_counting_errors_worked_example():
    mae, rmse = counting_errors([3, 5], [4, 7])
    assert mae == 1.5
    assert rmse == math.sqrt(2.5)


def test_counting_errors_identity_and_empty():
    assert counting_errors([1, 2, 3], [1, 2, 3]) == (0.0, 0.0)
    with pytest.raises(ValueError):
        counting_errors([], [])
    with pytest.raises(ValueError):
        counting_errors([1], [1, 2])


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 1000)), min_size=1, max_size=30))
def test_mae_never_exceeds_rmse(pairs):
    gt, pred = zip(*pairs)
    mae, rmse = counting_errors(gt, pred)
    assert mae <= rmse * (1 + 1e-12)


def test_localize_match_worked_example():
    tp, fp, fn, pairs = localize_match([(0, 0), (1, 1)], [(0.05, 0), (0.5, 0.5)], 0.1)
    assert (tp, fp, fn) == (1, 1, 1)
    assert pairs == [(0, 0)]


def test_localize_match_identity(rng):
    pts = rng.uniform(size=(7, 2))
    tp, fp, fn, _ = localize_match(pts, pts, 0.01)
    assert (tp, fp, fn) == (7, 0, 0)


def test_localize_match_empty_sets():
    assert localize_match([], [(0.5, 0.5)], 0.1)[:3] == (0, 1, 0)
    assert localize_match([(0.5, 0.5)], [], 0.1)[:3] == (0, 0, 1)
    assert localize_match([], [], 0.1)[:3] == (0, 0, 0)
    with pytest.raises(ValueError):
        localize_match([(0, 0)], [(0, 0)], 0.0)


def test_localize_match_prefers_cardinality_over_distance():
    # greedy nearest-first would pair pred 0 with gt 1 and leave gt 0 unmatched
    gt = [(0.0, 0.0), (0.1, 0.0)]
    preds = [(0.09, 0.0), (0.19, 0.0)]
    tp, fp, fn, pairs = localize_match(gt, preds, 0.095)
    assert tp == 2 and sorted(pairs) == [(0, 0), (1, 1)]


def test_localize_match_equals_exhaustive_oracle(rng):
    for _ in range(200):
        gt = rng.uniform(size=(rng.integers(0, 7), 2))
        preds = rng.uniform(size=(rng.integers(0, 7), 2))
        tau = rng.uniform(0.05, 0.5)
        tp, _, _, pairs = localize_match(gt, preds, tau)
        count, dist = exhaustive_match(gt, preds, tau)
        assert tp == count
        got = sum(np.linalg.norm(np.subtract(preds[i], gt[j])) for i, j in pairs)
        assert got == pytest.approx(dist, abs=1e-9)


def test_tp_monotone_in_tau(rng):
    for _ in range(30):
        gt = rng.uniform(size=(6, 2))
        preds = rng.uniform(size=(8, 2))
        tps = [localize_match(gt, preds, t)[0] for t in np.linspace(0.01, 1.5, 25)]
        assert all(a <= b for a, b in zip(tps, tps[1:]))


def test_report_is_permutation_invariant(rng):
    gt = rng.uniform(size=(6, 2))
    preds = rng.uniform(size=(5, 2))
    a = localize_match(gt, preds, 0.2)[:3]
    b = localize_match(gt[rng.permutation(6)], preds[rng.permutation(5)], 0.2)[:3]
    assert a == b


def test_prf1_examples():
    assert prf1(1, 1, 1) == (0.5, 0.5, 0.5)
    assert prf1(0, 0, 0) == (1.0, 1.0, 1.0)
    assert prf1(0, 5, 3) == (0.0, 0.0, 0.0)
    assert prf1(3, 0, 0) == (1.0, 1.0, 1.0)


def test_evaluate_aggregates(rng):
    gts = [rng.uniform(size=(3, 2)), rng.uniform(size=(5, 2))]
    preds = [gts[0][:2], np.vstack([gts[1], [[0.5, 0.5]]])]
    report = evaluate(gts, preds, tau=1e-6)
    assert isinstance(report, MetricsReport)
    assert (report.tp, report.fp, report.fn) == (7, 1, 1)
    assert report.mae == 1.0 and report.rmse == 1.0
    assert report.tp + report.fp == 8 and report.tp + report.fn == 8
    assert 0 <= report.f1 <= 1
