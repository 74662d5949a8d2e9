import csv
import math

import numpy as np
import pytest

from obsurgeon.fisher import AlignmentError, FisherInverseEstimator
from obsurgeon.oracles import constrained_minimum, dense_fisher
from obsurgeon.saliency import (
    GroupConflictError,
    GroupSpec,
    MonotonicityError,
    SaliencyReport,
    optimal_update,
    predicted_loss_increase,
    prune_step,
    score_group,
    score_groups,
    select_groups,
    target_group_count,
)
from obsurgeon.weights import Segment, WeightStore


@pytest.fixture
def est_2x2():
    # lambda I + g g^T with g = (1, 1): F = [[2, 1], [1, 2]]
    return FisherInverseEstimator(2, 2, dampening=1.0, num_grads=1).update(np.array([1.0, 1.0]))


def test_identity_fisher_score():
    est = FisherInverseEstimator(4, 4, dampening=1.0)
    assert score_group(np.array([3.0, 4.0, 0, 0]), est, 0, GroupSpec(2)) == pytest.approx(12.5, abs=1e-12)
    assert score_group(np.zeros(4), est, 1, GroupSpec(2)) == 0.0


def test_single_weight_formula():
    # [F^-1]_jj = 0.5 on a fresh estimator with lambda = 2
    est = FisherInverseEstimator(3, 3, dampening=2.0)
    assert score_group(np.array([0.0, 2.0, 0.0]), est, 1) == pytest.approx(4.0, abs=1e-15)


def test_2x2_update_and_saliency(est_2x2):
    w = np.array([1.0, 1.0])
    delta = optimal_update(w, est_2x2, [0])
    np.testing.assert_allclose(delta, [-1.0, 0.5], atol=1e-12)
    scores = score_groups(w, est_2x2)
    assert scores[0] == pytest.approx(0.75, abs=1e-12)
    F = np.array([[2.0, 1.0], [1.0, 2.0]])
    assert 0.5 * delta @ F @ delta == pytest.approx(0.75, abs=1e-12)
    rep = SaliencyReport(scores, 1, [0])
    assert predicted_loss_increase(rep) == pytest.approx(0.75, abs=1e-12)


def test_identity_fisher_update_zeroes_group_only():
    est = FisherInverseEstimator(8, 4, dampening=0.3)
    w = np.arange(1.0, 9.0)
    delta = optimal_update(w, est, [1], GroupSpec(2))
    expected = np.zeros(8)
    expected[2:4] = -w[2:4]
    np.testing.assert_allclose(delta, expected, atol=1e-12)


def test_update_confined_to_block():
    rng = np.random.default_rng(0)
    est = FisherInverseEstimator(12, 4, 1e-2, 6).update_many(rng.normal(size=(6, 12)))
    w = rng.normal(size=12)
    delta = optimal_update(w, est, [5])
    assert np.all(delta[:4] == 0) and np.all(delta[8:] == 0)
    assert w[5] + delta[5] == 0.0


def test_pruning_whole_block_zeroes_it():
    rng = np.random.default_rng(1)
    est = FisherInverseEstimator(8, 4, 1e-2, 6).update_many(rng.normal(size=(6, 8)))
    w = rng.normal(size=8)
    new = w + optimal_update(w, est, [0, 1], GroupSpec(2))
    np.testing.assert_array_equal(new[:4], 0.0)


def test_update_respects_prior_mask():
    rng = np.random.default_rng(2)
    est = FisherInverseEstimator(10, 5, 1e-3, 8).update_many(rng.normal(size=(8, 10)))
    mask = np.ones(10, dtype=bool)
    mask[[1, 7]] = False
    w = rng.normal(size=10) * mask
    new = w + optimal_update(w, est, [3, 8], mask=mask)
    np.testing.assert_array_equal(new[[1, 3, 7, 8]], 0.0)


def test_conflicting_groups():
    est = FisherInverseEstimator(4, 4)
    with pytest.raises(GroupConflictError):
        optimal_update(np.ones(4), est, [1, 1])


def test_misaligned_group_size():
    est = FisherInverseEstimator(12, 6)
    with pytest.raises(AlignmentError):
        score_groups(np.ones(12), est, GroupSpec(4))
    with pytest.raises(AlignmentError):
        GroupSpec(4).validate(16, 8, boundaries=[0, 6])


def test_already_pruned_groups_are_infinite():
    est = FisherInverseEstimator(8, 4)
    mask = np.ones(8, dtype=bool)
    mask[5] = False
    s = score_groups(np.ones(8), est, GroupSpec(2), mask)
    assert s[2] == math.inf and np.all(np.isfinite(s[[0, 1, 3]]))
    assert score_group(np.ones(8), est, 2, GroupSpec(2), mask) == math.inf


def test_select_groups_examples():
    scores = np.array([5.0, 1.0, 3.0, math.inf])
    mask = np.array([True, True, True, False])
    assert select_groups(scores, mask, 0.5) == [1]
    assert select_groups(scores, mask, 0.25) == []
    assert select_groups(np.ones(2), np.ones(8, bool), 0.5, group_size=4) == [0]
    with pytest.raises(MonotonicityError):
        select_groups(np.ones(8), np.r_[np.zeros(4, bool), np.ones(4, bool)], 0.2)


def test_target_group_count_rounding():
    assert target_group_count(0.9, 20000, 1) == 18000
    assert target_group_count(0.5, 10, 4) == 2
    assert target_group_count(0.0, 10, 1) == 0


def test_scores_nonnegative_and_group_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        q = int(rng.choice([1, 2, 4]))
        d = 8
        G = rng.normal(size=(5, d))
        est = FisherInverseEstimator(d, d, 1e-2, 5).update_many(G)
        w = rng.normal(size=d)
        scores = score_groups(w, est, GroupSpec(q))
        assert np.all(scores >= 0)
        F = dense_fisher(G, 1e-2, 5)
        for g in range(d // q):
            Q = np.arange(g * q, (g + 1) * q)
            _, cost = constrained_minimum(w, F, Q)
            np.testing.assert_allclose(cost, scores[g], rtol=1e-9)


def test_prune_step_reaches_target():
    rng = np.random.default_rng(6)
    est = FisherInverseEstimator(40, 8, 1e-3, 16).update_many(rng.normal(size=(16, 40)))
    w = rng.normal(size=40)
    mask, delta, rep = prune_step(w, est, np.ones(40, bool), 0.5, GroupSpec(4))
    assert (~mask).sum() == 20
    assert len(rep.pruned_groups) == 5
    np.testing.assert_array_equal((w + delta)[~mask], 0.0)
    mask2, delta2, _ = prune_step(w, est, np.ones(40, bool), 0.5, GroupSpec(4), compensate=False)
    np.testing.assert_array_equal(mask2, mask)
    np.testing.assert_array_equal((w + delta2)[mask2], w[mask2])


def test_report_csv(tmp_path):
    store = WeightStore(np.zeros(6), (Segment("a", 0, 4), Segment("b", 4, 6)))
    rep = SaliencyReport(np.array([0.5, math.inf, 0.25]), 2, [2])
    rep.to_csv(tmp_path / "s.csv", store)
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["layer"] for r in rows] == ["a", "a", "b"]
    assert [r["offset"] for r in rows] == ["0", "2", "0"]
    assert [r["pruned_flag"] for r in rows] == ["0", "0", "1"]
    assert float(rows[1]["score"]) == math.inf
