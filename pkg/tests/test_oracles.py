import numpy as np
import pytest

from obsurgeon.oracles import (
    MAX_EXACT_DIM,
    MAX_EXHAUSTIVE_DIM,
    MAX_ORACLE_DIM,
    constrained_minimum,
    dense_fisher,
    exact_block_inverse,
    oracle_best_group,
    oracle_check,
    oracle_dense_inverse,
)


def test_no_gradients_is_scaled_identity():
    out = oracle_dense_inverse(np.zeros((0, 5)), 1.0, 4, 2)
    assert out.shape == (3, 2, 2)
    np.testing.assert_array_equal(out, np.broadcast_to(np.eye(2), (3, 2, 2)))
    with pytest.raises(ValueError):
        oracle_dense_inverse(np.zeros(0), 1.0, 4, 2)


def test_unit_gradient_block():
    out = oracle_dense_inverse(np.array([[1.0, 0.0]]), 1.0, 1, 2)
    np.testing.assert_allclose(out[0], np.diag([0.5, 1.0]), atol=1e-15)


def test_dense_fisher():
    G = np.array([[1.0, 1.0]])
    np.testing.assert_array_equal(dense_fisher(G, 1.0, 1), [[2.0, 1.0], [1.0, 2.0]])


def test_constrained_minimum_2x2():
    dw, cost = constrained_minimum(np.ones(2), [[2.0, 1.0], [1.0, 2.0]], [0])
    np.testing.assert_allclose(dw, [-1.0, 0.5], atol=1e-12)
    assert cost == pytest.approx(0.75, abs=1e-12)


def test_all_coordinates_removes_everything():
    rng = np.random.default_rng(0)
    w = rng.normal(size=6)
    F = dense_fisher(rng.normal(size=(3, 6)), 0.1, 3)
    dw, cost = constrained_minimum(w, F, np.arange(6))
    np.testing.assert_allclose(dw, -w, atol=1e-12)
    assert cost == pytest.approx(0.5 * w @ F @ w, rel=1e-12)


def test_isotropic_fisher_picks_smallest_norm_group():
    w = np.array([3.0, 1.0, 0.2, 0.3, 2.0, 2.0, 0.1, 5.0])
    assert oracle_best_group(w, 4.0 * np.eye(8), 2) == 1
    assert oracle_best_group(w, np.eye(8), 1) == 6


def test_size_limits():
    with pytest.raises(ValueError, match=str(MAX_ORACLE_DIM)):
        oracle_dense_inverse(np.ones((1, MAX_ORACLE_DIM + 1)), 1.0, 1, 2)
    with pytest.raises(ValueError, match=str(MAX_EXHAUSTIVE_DIM)):
        oracle_best_group(np.ones(MAX_EXHAUSTIVE_DIM + 1), np.eye(MAX_EXHAUSTIVE_DIM + 1), 1)
    with pytest.raises(ValueError):
        oracle_dense_inverse(np.ones((1, 4)), 0.0, 1, 2)


def test_exact_inverse_small_cases():
    np.testing.assert_array_equal(exact_block_inverse(np.array([[1.0, 0.0]]), 1.0, 1), np.diag([0.5, 1.0]))
    np.testing.assert_array_equal(exact_block_inverse(np.zeros((0, 3)), 0.25, 1), 4.0 * np.eye(3))
    with pytest.raises(ValueError, match=str(MAX_EXACT_DIM)):
        exact_block_inverse(np.ones((1, MAX_EXACT_DIM + 1)), 1.0, 1)


def test_oracle_check_small():
    res = oracle_check(n_configs=3, n_instances=20, seed=1)
    assert res["group_matches"] == 20
    assert res["fisher_max_rel_error"] <= 1e-8


def test_dense_inverse_against_exact_arithmetic():
    rng = np.random.default_rng(3)
    for _ in range(30):
        B = int(rng.choice([2, 3, 5]))
        m = int(rng.integers(1, 2 * B + 1))
        lam = float(10 ** rng.uniform(-7, -1))
        G = rng.normal(size=(m, B)) * 10 ** rng.uniform(-2, 1)
        ex = exact_block_inverse(G, lam, m)
        assert np.max(np.abs(oracle_dense_inverse(G, lam, m, B)[0] - ex)) <= 1e-11 * max(1.0, np.abs(ex).max())
