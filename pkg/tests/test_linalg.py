import numpy as np
import pytest

from fedlora.linalg import (
    effective_rank,
    frobenius_distance,
    numerical_rank,
    orthogonal_complement_sample,
    svd,
)
from fedlora.rng import stream


def gauss_elim_rank(matrix, tol=1e-8):
    """Independent rank oracle: row reduction with partial pivoting."""
    a = np.array(matrix, dtype=float)
    rows, cols = a.shape
    rank = 0
    for col in range(cols):
        if rank >= rows:
            break
        pivot = rank + int(np.argmax(np.abs(a[rank:, col])))
        if abs(a[pivot, col]) < tol:
            continue
        a[[rank, pivot]] = a[[pivot, rank]]
        a[rank] = a[rank] / a[rank, col]
        for r in range(rows):
            if r != rank:
                a[r] = a[r] - a[r, col] * a[rank]
        rank += 1
    return rank


def random_with_singular_values(values, rng, m=None, n=None):
    values = np.asarray(values, dtype=float)
    m = m or values.size
    n = n or values.size
    u, _ = np.linalg.qr(rng.normal(size=(m, m)))
    v, _ = np.linalg.qr(rng.normal(size=(n, n)))
    k = values.size
    return (u[:, :k] * values) @ v[:, :k].T


class TestSvd:
    def test_identity_singular_values(self):
        result = svd(np.eye(3))
        assert np.allclose(result.singular_values, [1, 1, 1])

    def test_diagonal_singular_values(self):
        result = svd(np.diag([3.0, 2.0, 1.0]))
        assert np.allclose(result.singular_values, [3, 2, 1])

    def test_rank3_product_has_three_singular_values(self):
        rng = stream(11)
        p = rng.normal(size=(10, 3))
        q = rng.normal(size=(3, 10))
        m = p @ q
        result = svd(m)
        assert int(np.sum(result.singular_values > 1e-8)) == 3
        assert gauss_elim_rank(m) == 3  # independent oracle agrees

    def test_reconstruction_up_to_64(self):
        rng = stream(5)
        for shape in [(1, 1), (2, 5), (8, 8), (17, 9), (64, 64), (31, 64)]:
            m = rng.normal(size=shape)
            result = svd(m)
            err = np.linalg.norm(result.reconstruct() - m) / np.linalg.norm(m)
            assert err < 1e-8, shape

    def test_descending_order(self):
        rng = stream(6)
        s = svd(rng.normal(size=(12, 7))).singular_values
        assert np.all(np.diff(s) <= 0)

    def test_non_finite_rejected(self):
        bad = np.eye(3)
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            svd(bad)


class TestEffectiveRank:
    def test_hand_computed_example(self):
        # singular values (5, 4, 3): cumulative 5 < 10.8, 9 < 10.8, 12 >= 10.8
        m = random_with_singular_values([5.0, 4.0, 3.0], stream(3), m=6, n=6)
        assert effective_rank(m, 0.9) == 3

    def test_bounded_by_min_dimension(self):
        rng = stream(4)
        for _ in range(5):
            m = rng.normal(size=(9, 5))
            assert effective_rank(m, 0.9) <= 5

    def test_zero_matrix_is_rank_zero(self):
        assert effective_rank(np.zeros((4, 4)), 0.9) == 0

    def test_monotone_in_threshold(self):
        rng = stream(9)
        m = rng.normal(size=(8, 8))
        thresholds = np.linspace(0.05, 1.0, 30)
        ranks = [effective_rank(m, t) for t in thresholds]
        assert all(a <= b for a, b in zip(ranks, ranks[1:]))

    def test_exact_low_rank_with_separated_values(self):
        for k, values in ((2, [5.0, 4.0]), (3, [5.0, 4.0, 3.0]), (4, [6.0, 5.0, 4.0, 3.0])):
            m = random_with_singular_values(values, stream(k), m=10, n=10)
            assert effective_rank(m, 0.9) == k
            assert effective_rank(m, 1.0 - 1e-9) == k

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            effective_rank(np.eye(2), 0.0)
        with pytest.raises(ValueError):
            effective_rank(np.eye(2), 1.5)


class TestFrobeniusDistance:
    def test_identical_is_zero(self):
        m = stream(1).normal(size=(4, 4))
        assert frobenius_distance(m, m) == 0.0

    def test_zero_vs_ones(self):
        assert frobenius_distance(np.zeros((2, 2)), np.ones((2, 2))) == pytest.approx(2.0)

    def test_trace_identity_oracle(self):
        rng = stream(2)
        a = rng.normal(size=(10, 10))
        b = rng.normal(size=(10, 10))
        delta = a - b
        oracle = np.sqrt(np.trace(delta @ delta.T))
        assert frobenius_distance(a, b) == pytest.approx(oracle, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            frobenius_distance(np.zeros((2, 2)), np.zeros((2, 3)))


class TestOrthogonalComplement:
    def test_orthogonality_by_construction(self):
        rng = stream(21)
        b0 = rng.normal(size=(10, 4))
        a0 = rng.normal(size=(4, 10))
        d, c = orthogonal_complement_sample(a0, b0, 2, rng)
        assert np.max(np.abs(d.T @ b0)) < 1e-10
        assert np.max(np.abs(c @ a0.T)) < 1e-10

    def test_rank_additivity(self):
        # rank(B0 A0 + D C) = rank(B0 A0) + out_rank with probability 1
        for trial in range(20):
            rng = stream(100 + trial)
            b0 = rng.normal(size=(10, 4))
            a0 = rng.normal(size=(4, 10))
            d, c = orthogonal_complement_sample(a0, b0, 2, rng)
            total = b0 @ a0 + d @ c
            assert gauss_elim_rank(total) == 6
            assert numerical_rank(total) == 6

    def test_zero_out_rank_returns_empty_factors(self):
        rng = stream(22)
        b0 = rng.normal(size=(6, 2))
        a0 = rng.normal(size=(2, 6))
        d, c = orthogonal_complement_sample(a0, b0, 0, rng)
        assert d.shape == (6, 0) and c.shape == (0, 6)
        assert np.array_equal(b0 @ a0 + d @ c, b0 @ a0)

    def test_insufficient_complement_dimension(self):
        rng = stream(23)
        b0 = rng.normal(size=(5, 4))
        a0 = rng.normal(size=(4, 5))
        with pytest.raises(ValueError):
            orthogonal_complement_sample(a0, b0, 2, rng)
