import numpy as np
import pytest

from fedlora.adapters import AdapterPair, gaussian_pair, orthogonal_pair
from fedlora.regression import (
    RegressionData,
    TwoLevelRegressionTask,
    rrr_best_fit,
    rrr_eigenvalues,
    two_level_cross_hvp,
    two_level_grads,
    two_level_loss,
)
from fedlora.rng import stream


def fd_gradients(loss_fn, arrays, step=1e-5):
    """Central-difference oracle over every entry of every array (in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = arr[idx]
            arr[idx] = original + step
            plus = loss_fn()
            arr[idx] = original - step
            minus = loss_fn()
            arr[idx] = original
            g[idx] = (plus - minus) / (2.0 * step)
        grads.append(g)
    return grads


def random_instance(seed, samples=12, m=8, n=6, r=3, r_local=2):
    rng = stream(seed)
    w0 = rng.normal(size=(m, n))
    shared = gaussian_pair(m, n, r, rng)
    local = gaussian_pair(m, n, r_local, rng)
    data = RegressionData(rng.normal(size=(samples, m)), rng.normal(size=(samples, n)))
    return w0, shared, local, data


class TestLoss:
    def test_all_zero(self):
        data = RegressionData(np.ones((3, 2)), np.zeros((3, 2)))
        shared = AdapterPair(np.zeros((2, 1)), np.zeros((1, 2)))
        local = AdapterPair(np.zeros((2, 1)), np.zeros((1, 2)))
        assert two_level_loss(np.zeros((2, 2)), shared, local, data) == 0.0

    def test_perfect_fit(self):
        rng = stream(1)
        w0 = rng.normal(size=(4, 3))
        shared = gaussian_pair(4, 3, 2, rng)
        local = gaussian_pair(4, 3, 1, rng)
        x = rng.normal(size=(9, 4))
        y = x @ (w0 + shared.product() + local.product())
        data = RegressionData(x, y)
        assert two_level_loss(w0, shared, local, data) == pytest.approx(0.0, abs=1e-24)

    def test_scalar_case_by_hand(self):
        # X = [1], W0 = 0, shared product = 2, local product = 1, Y = 0 -> (3)^2 = 9
        data = RegressionData(np.array([[1.0]]), np.array([[0.0]]))
        shared = AdapterPair(np.array([[1.0]]), np.array([[2.0]]))
        local = AdapterPair(np.array([[1.0]]), np.array([[1.0]]))
        assert two_level_loss(np.zeros((1, 1)), shared, local, data) == pytest.approx(9.0)

    def test_shape_mismatch(self):
        data = RegressionData(np.ones((3, 2)), np.ones((3, 2)))
        shared = AdapterPair(np.zeros((3, 1)), np.zeros((1, 2)))
        with pytest.raises(ValueError):
            two_level_loss(np.zeros((3, 2)), shared, None, data)


class TestGrads:
    def test_zero_at_perfect_fit(self):
        rng = stream(2)
        w0 = rng.normal(size=(4, 3))
        shared = gaussian_pair(4, 3, 2, rng)
        local = gaussian_pair(4, 3, 1, rng)
        x = rng.normal(size=(9, 4))
        data = RegressionData(x, x @ (w0 + shared.product() + local.product()))
        (gl, gr), (hl, hr) = two_level_grads(w0, shared, local, data)
        for g in (gl, gr, hl, hr):
            assert np.max(np.abs(g)) < 1e-12

    def test_scalar_local_gradient_by_hand(self):
        # residual 3, local = (1, 1): d/d(left) = 2 * 1 * 3 * right = 6
        data = RegressionData(np.array([[1.0]]), np.array([[0.0]]))
        shared = AdapterPair(np.array([[1.0]]), np.array([[2.0]]))
        local = AdapterPair(np.array([[1.0]]), np.array([[1.0]]))
        _, (g_left, g_right) = two_level_grads(np.zeros((1, 1)), shared, local, data)
        assert g_left[0, 0] == pytest.approx(6.0)
        assert g_right[0, 0] == pytest.approx(6.0)

    def test_matches_finite_differences(self):
        w0, shared, local, data = random_instance(3)
        arrays = [shared.left, shared.right, local.left, local.right]
        loss_fn = lambda: two_level_loss(w0, shared, local, data)
        fd = fd_gradients(loss_fn, arrays)
        (gl, gr), (hl, hr) = two_level_grads(w0, shared, local, data)
        for analytic, numeric in zip((gl, gr, hl, hr), fd):
            assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


class TestCrossHvp:
    def test_zero_direction(self):
        w0, shared, local, data = random_instance(4)
        hv_l, hv_r = two_level_cross_hvp(w0, shared, local, data,
                                         np.zeros_like(local.left),
                                         np.zeros_like(local.right))
        assert np.max(np.abs(hv_l)) == 0.0
        assert np.max(np.abs(hv_r)) == 0.0

    def test_linearity_is_exact_for_power_of_two_scaling(self):
        w0, shared, local, data = random_instance(5)
        rng = stream(55)
        v_l = rng.normal(size=local.left.shape)
        v_r = rng.normal(size=local.right.shape)
        base = two_level_cross_hvp(w0, shared, local, data, v_l, v_r)
        doubled = two_level_cross_hvp(w0, shared, local, data, 2.0 * v_l, 2.0 * v_r)
        assert np.array_equal(doubled[0], 2.0 * base[0])
        assert np.array_equal(doubled[1], 2.0 * base[1])

    def test_matches_finite_differences_of_shared_gradient(self):
        w0, shared, local, data = random_instance(6)
        rng = stream(66)
        v_l = rng.normal(size=local.left.shape)
        v_r = rng.normal(size=local.right.shape)
        step = 1e-6

        def shared_grad(scale):
            probe = AdapterPair(local.left + scale * v_l, local.right + scale * v_r)
            (gl, gr), _ = two_level_grads(w0, shared, probe, data)
            return gl, gr

        gl_p, gr_p = shared_grad(step)
        gl_m, gr_m = shared_grad(-step)
        fd_l = (gl_p - gl_m) / (2 * step)
        fd_r = (gr_p - gr_m) / (2 * step)
        hv_l, hv_r = two_level_cross_hvp(w0, shared, local, data, v_l, v_r)
        assert np.allclose(hv_l, fd_l, rtol=1e-6, atol=1e-8)
        assert np.allclose(hv_r, fd_r, rtol=1e-6, atol=1e-8)


def test_gradient_correctness_across_random_instances():
    # analytic derivatives vs the central-difference oracle, m, n <= 12
    for trial in range(8):
        rng = stream(700 + trial)
        m = int(rng.integers(3, 13))
        n = int(rng.integers(3, 13))
        r = int(rng.integers(2, min(m, n) + 1))
        r_local = max(1, r - 1)
        w0, shared, local, data = random_instance(800 + trial, samples=10, m=m, n=n,
                                                  r=r, r_local=r_local)
        arrays = [shared.left, shared.right, local.left, local.right]
        fd = fd_gradients(lambda: two_level_loss(w0, shared, local, data), arrays)
        (gl, gr), (hl, hr) = two_level_grads(w0, shared, local, data)
        for analytic, numeric in zip((gl, gr, hl, hr), fd):
            assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-6)


def test_rank_additivity_through_orthogonal_adapters():
    for trial in range(20):
        rng = stream(900 + trial)
        shared = gaussian_pair(10, 10, 4, rng)
        local = orthogonal_pair(shared, 2, rng)
        combined = shared.product() + local.product()
        s = np.linalg.svd(combined, compute_uv=False)
        assert int(np.sum(s > 1e-10 * s[0])) == 6


class TestTaskProtocol:
    def test_task_wraps_parameter_tuples(self):
        w0, shared, local, data = random_instance(7)
        task = TwoLevelRegressionTask(w0, data)
        x = shared.params()
        y = local.params()
        assert task.loss(x, y) == pytest.approx(two_level_loss(w0, shared, local, data))
        gx = task.grad_x(x, y)
        (gl, gr), _ = two_level_grads(w0, shared, local, data)
        assert np.array_equal(gx[0], gl) and np.array_equal(gx[1], gr)

    def test_batch_subsetting(self):
        w0, shared, local, data = random_instance(8, samples=20)
        task = TwoLevelRegressionTask(w0, data)
        batch = np.arange(5)
        sub = RegressionData(data.inputs[:5], data.targets[:5])
        expected = two_level_loss(w0, shared, local, sub)
        assert task.loss(shared.params(), local.params(), batch) == pytest.approx(expected)


class TestReducedRankOracle:
    @staticmethod
    def noiseless_data(seed, rank, samples=200, dim=10):
        rng = stream(seed)
        w = rng.normal(size=(dim, rank)) @ rng.normal(size=(rank, dim))
        x = rng.normal(size=(samples, dim))
        return RegressionData(x, x @ w), w

    def test_exact_recovery_at_or_above_true_rank(self):
        data, _ = self.noiseless_data(31, 3)
        assert rrr_best_fit(data, 3).loss < 1e-20
        assert rrr_best_fit(data, 6).loss < 1e-20

    def test_underparameterized_fit_pays_positive_error(self):
        data, _ = self.noiseless_data(32, 3)
        assert rrr_best_fit(data, 2).loss > 1e-3

    def test_loss_non_increasing_in_rank(self):
        rng = stream(33)
        x = rng.normal(size=(60, 7))
        y = rng.normal(size=(60, 5))
        data = RegressionData(x, y)
        losses = [rrr_best_fit(data, r).loss for r in range(6)]
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_trailing_eigenvalue_identity(self):
        # loss(j) - loss(full) equals the trailing eigenvalue sum, so the
        # X-metric distance between the rank-j fit and the full fit is
        # sqrt(sum_{i>j} lambda_i)
        rng = stream(34)
        x = rng.normal(size=(80, 6))
        y = rng.normal(size=(80, 6))
        data = RegressionData(x, y)
        eigs = rrr_eigenvalues(data)
        full = rrr_best_fit(data, 6)
        for j in range(7):
            fit = rrr_best_fit(data, j)
            tail = float(np.sum(eigs[j:]))
            assert fit.loss - full.loss == pytest.approx(tail, abs=1e-9)
            distance = np.linalg.norm(x @ (full.coefficients - fit.coefficients))
            distance /= np.sqrt(data.samples)
            assert distance == pytest.approx(np.sqrt(max(tail, 0.0)), abs=1e-6)

    def test_rank_bounds_checked(self):
        data, _ = self.noiseless_data(35, 2, samples=50, dim=4)
        with pytest.raises(ValueError):
            rrr_best_fit(data, 5)
        with pytest.raises(ValueError):
            rrr_best_fit(data, -1)

    def test_singular_gram_rejected(self):
        x = np.zeros((10, 3))
        data = RegressionData(x, np.zeros((10, 3)))
        with pytest.raises(ValueError):
            rrr_best_fit(data, 1)
