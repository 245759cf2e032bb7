import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyseq import tensor as T
from polyseq.matching import hungarian, hungarian_assign, sinkhorn_normalize


def brute_force_cost(cost):
    n = len(cost)
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


@pytest.mark.parametrize("n", range(1, 8))
def test_hungarian_optimal_against_enumeration(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        cost = rng.normal(size=(n, n))
        col = hungarian(cost)
        assert sorted(col) == list(range(n))
        assert cost[np.arange(n), col].sum() == pytest.approx(brute_force_cost(cost), abs=1e-12)


def test_hungarian_integer_ties_are_deterministic():
    cost = np.ones((5, 5))
    a, b = hungarian(cost), hungarian(cost.copy())
    np.testing.assert_array_equal(a, b)
    assert sorted(a) == list(range(5))


def test_hungarian_rejects_non_square():
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))


def test_hungarian_assign_maximizes():
    s = np.array([[0.0, 5.0], [4.0, 0.0]])
    np.testing.assert_array_equal(hungarian_assign(s), [[0, 1], [1, 0]])


def test_hungarian_assign_returns_permutation_matrix():
    p = hungarian_assign(np.random.default_rng(0).normal(size=(9, 9)))
    assert p.dtype.kind == "i"
    assert (p.sum(0) == 1).all() and (p.sum(1) == 1).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 32), st.integers(0, 10_000))
def test_sinkhorn_entries_doubly_stochastic(n, seed):
    s = np.random.default_rng(seed).normal(size=(n, n))
    p = sinkhorn_normalize(T.Tensor(s), iterations=100).entries.values
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_sinkhorn_batched_matches_single():
    s = np.random.default_rng(1).normal(size=(3, 5, 5))
    batched = sinkhorn_normalize(T.Tensor(s), 20).entries.values
    for b in range(3):
        np.testing.assert_allclose(batched[b], sinkhorn_normalize(T.Tensor(s[b]), 20).entries.values, rtol=1e-12)


def test_sinkhorn_wide_scores_converge_slowly():
    # spread-out scores need more than 100 iterations: the row sums lag behind
    s = np.random.default_rng(3).normal(size=(2, 2)) * 40
    p = sinkhorn_normalize(T.Tensor(s), 100).entries.values
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)
    assert np.abs(p.sum(axis=1) - 1).max() > 1e-6


def test_sinkhorn_zero_scores_give_uniform():
    p = sinkhorn_normalize(T.Tensor(np.zeros((5, 5))), 100).entries.values
    np.testing.assert_allclose(p, 0.2, rtol=1e-14)


def test_sinkhorn_dominant_diagonal_gives_identity():
    p = sinkhorn_normalize(T.Tensor(10 * np.eye(6)), 100).entries.values
    np.testing.assert_allclose(p, np.eye(6), atol=1e-3)


def test_sinkhorn_low_temperature_argmax_matches_hungarian():
    s = np.random.default_rng(2).normal(size=(6, 6))
    p = sinkhorn_normalize(T.Tensor(s), 200, temperature=0.05).entries.values
    np.testing.assert_array_equal(p.argmax(axis=1), hungarian_assign(s).argmax(axis=1))


def test_hungarian_two_by_two_example():
    p = hungarian_assign(np.array([[1.0, 2.0], [3.0, 1.0]]))
    np.testing.assert_array_equal(p, [[0, 1], [1, 0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(0, 10_000), st.integers(0, 8), st.floats(-50, 50))
def test_hungarian_invariant_to_row_offset(n, seed, row, offset):
    s = np.random.default_rng(seed).normal(size=(n, n))
    shifted = s.copy()
    shifted[row % n] += offset
    base, moved = hungarian_assign(s), hungarian_assign(shifted)
    assert (s * base).sum() == pytest.approx((s * moved).sum(), abs=1e-9)


def test_sinkhorn_is_invariant_to_row_and_column_offsets():
    s = np.random.default_rng(3).normal(size=(4, 4))
    shifted = s + np.arange(4)[:, None] + 10 * np.arange(4)[None, :]
    a = sinkhorn_normalize(T.Tensor(s), 100).entries.values
    b = sinkhorn_normalize(T.Tensor(shifted), 100).entries.values
    np.testing.assert_allclose(a, b, atol=1e-9)


@pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"temperature": 0.0}, {"temperature": -1.0}])
def test_sinkhorn_rejects_bad_settings(kwargs):
    with pytest.raises(ValueError):
        sinkhorn_normalize(T.Tensor(np.zeros((3, 3))), **kwargs)


def test_sinkhorn_rejects_non_finite_and_non_square():
    with pytest.raises(ValueError):
        sinkhorn_normalize(T.Tensor(np.array([[0.0, np.inf], [0.0, 0.0]])))
    with pytest.raises(T.ShapeError):
        sinkhorn_normalize(T.Tensor(np.zeros((2, 3))))


def test_sinkhorn_records_iterations_and_temperature():
    res = sinkhorn_normalize(T.Tensor(np.zeros((2, 2))), iterations=7, temperature=0.5)
    assert res.iterations_used == 7 and res.temperature == 0.5
