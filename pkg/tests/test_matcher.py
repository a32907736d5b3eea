import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import box
from oracles import brute_force_optimum
from ppskit.jops import DynamicPartPrediction, QueryPrediction
from ppskit.losses import dice_loss
from ppskit.matcher import (
    EPS,
    MatchCostWeights,
    cost_matrix,
    hungarian,
    match_cost,
    match_parts_per_object,
    match_queries,
)
from ppskit.model import ObjectSegment, PartSegment


@pytest.mark.parametrize(
    "cost, pairs, total",
    [([[1, 2], [3, 1]], ((0, 0), (1, 1)), 2.0), ([[5]], ((0, 0),), 5.0)],
)
def test_small_examples(cost, pairs, total):
    a = hungarian(cost)
    assert a.pairs == pairs and a.cost == total


def test_empty():
    a = hungarian(np.zeros((0, 3)))
    assert a.pairs == () and a.unmatched_targets == (0, 1, 2)
    assert hungarian(np.zeros((2, 0))).unmatched_predictions == (0, 1)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        hungarian([[1.0, np.inf]])


@pytest.mark.parametrize("shape", [(7, 7), (5, 3), (3, 5), (6, 4), (1, 4), (4, 1)])
def test_matches_brute_force(shape):
    rng = np.random.default_rng(shape[0] * 10 + shape[1])
    for _ in range(40):
        c = rng.normal(size=shape) * 10
        best, _ = brute_force_optimum(c)
        a = hungarian(c)
        assert len(a.pairs) == min(shape)
        assert math.isclose(a.cost, best, rel_tol=0, abs_tol=1e-9)
        assert len(set(i for i, _ in a.pairs)) == len(a.pairs) == len(set(j for _, j in a.pairs))


@pytest.mark.parametrize("seed", range(10))
def test_ties_resolve_to_lexicographic_minimum(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 6, size=2))
    c = rng.integers(0, 3, size=shape).astype(float)
    _, lex = brute_force_optimum(c)
    runs = {hungarian(c).pairs for _ in range(5)}
    assert runs == {lex}


def test_all_equal_costs_give_identity():
    assert hungarian(np.ones((4, 4))).pairs == ((0, 0), (1, 1), (2, 2), (3, 3))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31), st.integers(-100, 100))
def test_shift_along_fully_assigned_axis(rows, cols, seed, delta):
    # every row (or column) of the shorter side is assigned, so shifting one
    # changes every optimal cost by the same amount and leaves the argmin set alone
    rng = np.random.default_rng(seed)
    c = rng.integers(-20, 20, size=(rows, cols)).astype(float)
    base = hungarian(c)
    shifted = c.copy()
    if rows <= cols:
        shifted[int(rng.integers(rows))] += delta
    else:
        shifted[:, int(rng.integers(cols))] += delta
    a = hungarian(shifted)
    assert a.cost == base.cost + delta
    assert a.pairs == base.pairs


# -- match cost --------------------------------------------------------------

def _gt(shape=(4, 4), cls=1):
    return ObjectSegment(cls, 0, box(shape, 0, 2, 0, 3))


def test_perfect_prediction_cost():
    gt = _gt()
    scores = np.array([0.0, 1.0, 0.0])
    prob = np.where(gt.mask, 1 - EPS, EPS)
    w = MatchCostWeights()
    assert match_cost(QueryPrediction(scores, prob), gt, w) == pytest.approx(-w.w_class, abs=1e-5)


@pytest.mark.parametrize("c", [1, 3, 9])
def test_uniform_prediction_cost(c):
    gt = _gt(cls=0)
    scores = np.full(c + 1, 1 / (c + 1))
    prob = np.full(gt.mask.shape, 0.5)
    w = MatchCostWeights(2.0, 5.0, 5.0)
    expected = w.w_class * (-1 / (c + 1)) + w.w_ce_mask * math.log(2) + w.w_dice * dice_loss(prob, gt.mask).value
    assert match_cost(QueryPrediction(scores, prob), gt, w) == pytest.approx(expected, abs=1e-12)


def test_zero_weights_zero_cost():
    rng = np.random.default_rng(0)
    p = QueryPrediction(rng.dirichlet(np.ones(3)), rng.random((4, 4)))
    assert match_cost(p, _gt(), MatchCostWeights(0, 0, 0)) == 0.0


def test_cost_matrix_agrees_with_scalar_cost():
    rng = np.random.default_rng(1)
    preds = [QueryPrediction(rng.dirichlet(np.ones(4)), rng.random((5, 6))) for _ in range(4)]
    gts = [ObjectSegment(int(rng.integers(3)), i, rng.random((5, 6)) < 0.4) for i in range(3)]
    m = cost_matrix(preds, gts)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            assert m[i, j] == pytest.approx(match_cost(p, g), abs=1e-10)


def test_single_pair_always_matched():
    p = QueryPrediction(np.array([0.1, 0.1, 0.8]), np.zeros((3, 3)))
    assert match_queries([p], [_gt((3, 3))]).pairs == ((0, 0),)


def test_perfect_copies_identity():
    rng = np.random.default_rng(2)
    gts = [ObjectSegment(i % 2, i, rng.random((6, 6)) < 0.5) for i in range(4)]
    preds = []
    for g in gts:
        s = np.full(3, 1e-6)
        s[g.object_class] = 1.0
        preds.append(QueryPrediction(s, g.mask.astype(float)))
    assert match_queries(preds, gts).pairs == tuple((i, i) for i in range(4))


def test_five_preds_three_gts_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        preds = [QueryPrediction(rng.dirichlet(np.ones(4)), rng.random((4, 4))) for _ in range(5)]
        gts = [ObjectSegment(int(rng.integers(3)), i, rng.random((4, 4)) < 0.5) for i in range(3)]
        a = match_queries(preds, gts)
        best, _ = brute_force_optimum(cost_matrix(preds, gts))
        assert a.cost == pytest.approx(best, abs=1e-9)
        assert len(a.unmatched_predictions) == 2


# -- dynamic part matching ---------------------------------------------------

def _dyn(rng, n, npc, shape):
    return [DynamicPartPrediction(rng.dirichlet(np.ones(npc + 1)), rng.random(shape)) for _ in range(n)]


def test_no_gt_parts_all_unmatched():
    d = _dyn(np.random.default_rng(0), 50, 3, (4, 4))
    a = match_parts_per_object(d, [])
    assert a.pairs == () and len(a.unmatched_predictions) == 50


def test_exact_dynamic_queries_identity():
    shape = (4, 4)
    parts = [PartSegment(1, box(shape, 0, 2, 0, 4)), PartSegment(2, box(shape, 2, 4, 0, 4))]
    d = []
    for p in parts:
        s = np.full(4, 1e-6)
        s[p.part_class - 1] = 1.0
        d.append(DynamicPartPrediction(s, p.mask.astype(float)))
    assert match_parts_per_object(d, parts).pairs == ((0, 0), (1, 1))


def test_six_dynamic_vs_four_parts_brute_force():
    rng = np.random.default_rng(4)
    shape = (4, 4)
    for _ in range(20):
        d = _dyn(rng, 6, 4, shape)
        parts = [PartSegment(k, rng.random(shape) < 0.3) for k in (1, 2, 3, 4)]
        a = match_parts_per_object(d, parts)
        c = np.array([[match_cost(QueryPrediction(q.class_scores, q.mask_prob),
                                  ObjectSegment(p.part_class - 1, 0, p.mask)) for p in parts] for q in d])
        best, _ = brute_force_optimum(c)
        assert a.cost == pytest.approx(best, abs=1e-9)
