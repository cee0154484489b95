import numpy as np
import pytest

from stspike.errors import InputError
from stspike.kernels import (
    CoordinateGrid,
    KroneckerCovariance,
    ar1_temporal_kernel,
    check_covariance,
    jittered_cholesky,
    kron_eigendecompose,
    kron_matvec,
    low_rank_approximate,
    squared_exponential,
)


def random_psd(rng, n, rank=None):
    B = rng.standard_normal((n, rank or n))
    return B @ B.T + (0 if rank else 0.1) * np.eye(n)


class TestSquaredExponential:
    def test_single_point(self):
        assert squared_exponential([0.0], 3.0, 5.0).tolist() == [[5.0]]

    def test_vanishing_lengthscale(self):
        k = squared_exponential([0.0, 1.0], 1e-3, 2.0)
        np.testing.assert_array_equal(k, np.diag([2.0, 2.0]))

    def test_unit_distance(self):
        k = squared_exponential([0.0, 1.0], 1.0, 1.0)
        assert k[0, 1] == pytest.approx(np.exp(-0.5), rel=1e-15)

    def test_two_dimensional_coordinates(self):
        pts = np.array([[0.0, 0.0], [3.0, 4.0]])
        k = squared_exponential(CoordinateGrid(pts), 5.0, 1.0)
        assert k[0, 1] == pytest.approx(np.exp(-0.5))

    @pytest.mark.parametrize("ell,kappa", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_rejects_nonpositive(self, ell, kappa):
        with pytest.raises(InputError):
            squared_exponential([0.0, 1.0], ell, kappa)

    def test_rejects_nonfinite_coordinates(self):
        with pytest.raises(InputError):
            squared_exponential([0.0, np.nan], 1.0, 1.0)


class TestAR1:
    def test_alpha_zero_is_identity(self):
        np.testing.assert_array_equal(ar1_temporal_kernel(0.0, 3), np.eye(3))

    def test_two_steps(self):
        np.testing.assert_allclose(ar1_temporal_kernel(0.5, 2), [[1.0, 0.5], [0.5, 1.0]])

    def test_alpha_one_rejected(self):
        with pytest.raises(InputError):
            ar1_temporal_kernel(1.0, 3)

    def test_recursion_monte_carlo(self):
        # g_t = alpha g_{t-1} + sqrt(1 - alpha^2) e_t started in the stationary law
        alpha, T, n = 0.9, 50, 20_000
        rng = np.random.default_rng(3)
        g = np.empty((n, T))
        g[:, 0] = rng.standard_normal(n)
        for t in range(1, T):
            g[:, t] = alpha * g[:, t - 1] + np.sqrt(1 - alpha**2) * rng.standard_normal(n)
        var = g.var(axis=0)
        se = np.sqrt(2.0 / n)  # sd of a sample variance of unit-variance Gaussians
        assert np.all(np.abs(var - 1.0) < 5 * se)
        k = ar1_temporal_kernel(alpha, T)
        emp = g.T @ g / n
        assert np.max(np.abs(emp - k)) < 0.06


class TestKronecker:
    def test_identity_spectrum(self):
        et, es = kron_eigendecompose(KroneckerCovariance(np.eye(3), np.eye(2)))
        np.testing.assert_array_equal(np.outer(et.eigenvalues, es.eigenvalues).ravel(), np.ones(6))

    def test_spectrum_vs_dense(self):
        rng = np.random.default_rng(0)
        cov = KroneckerCovariance(random_psd(rng, 3), random_psd(rng, 2))
        et, es = kron_eigendecompose(cov)
        prod = np.sort(np.outer(et.eigenvalues, es.eigenvalues).ravel())
        np.testing.assert_allclose(prod, np.linalg.eigvalsh(cov.dense()), rtol=0, atol=1e-10)

    def test_rank_deficient_factor(self):
        rng = np.random.default_rng(1)
        cov = KroneckerCovariance(random_psd(rng, 3, rank=2), random_psd(rng, 2))
        et, es = kron_eigendecompose(cov)
        prod = np.outer(et.eigenvalues, es.eigenvalues).ravel()
        assert np.sum(np.abs(prod) < 1e-10) == 2

    def test_matvec_identity(self):
        v = np.arange(6.0)
        np.testing.assert_array_equal(kron_matvec(np.eye(2), np.eye(3), v), v)

    def test_matvec_scaled_temporal(self):
        v = np.random.default_rng(2).standard_normal(6)
        np.testing.assert_allclose(kron_matvec(2 * np.eye(2), np.eye(3), v), 2 * v)

    def test_matvec_vs_dense(self):
        rng = np.random.default_rng(4)
        kt, ks = rng.standard_normal((2, 2)), rng.standard_normal((3, 3))
        v = rng.standard_normal(6)
        np.testing.assert_allclose(kron_matvec(kt, ks, v), np.kron(kt, ks) @ v, rtol=0, atol=1e-12)

    def test_flattening_is_time_slowest(self):
        cov = KroneckerCovariance(np.array([[2.0, 0.0], [0.0, 3.0]]), np.eye(2))
        np.testing.assert_array_equal(cov.diag(), [2.0, 2.0, 3.0, 3.0])

    def test_matvec_matrix_argument(self):
        rng = np.random.default_rng(5)
        kt, ks = random_psd(rng, 2), random_psd(rng, 3)
        V = rng.standard_normal((6, 4))
        np.testing.assert_allclose(kron_matvec(kt, ks, V), np.kron(kt, ks) @ V, atol=1e-12)


class TestLowRank:
    def test_full_rank_reconstructs(self):
        rng = np.random.default_rng(0)
        cov = KroneckerCovariance(random_psd(rng, 3), random_psd(rng, 4))
        lr = low_rank_approximate(cov, rank=12)
        np.testing.assert_allclose(lr.diagonal, 0.0, atol=1e-8)
        np.testing.assert_allclose(lr.dense(), cov.dense(), atol=1e-8)

    def test_rank_zero_is_diagonal(self):
        rng = np.random.default_rng(1)
        cov = KroneckerCovariance(random_psd(rng, 2), random_psd(rng, 3))
        lr = low_rank_approximate(cov, rank=0)
        assert lr.rank == 0
        np.testing.assert_allclose(lr.dense(), np.diag(cov.diag()), atol=1e-14)

    def test_diagonal_is_exact(self):
        rng = np.random.default_rng(2)
        m = random_psd(rng, 8)
        lr = low_rank_approximate(m, fraction=0.7)
        np.testing.assert_allclose(lr.diag(), np.diag(m), rtol=1e-12)
        assert np.all(lr.diagonal >= 0)

    def test_fraction_count_on_se_kernel(self):
        # SE kernel with lengthscale 75 on a unit grid: a 0.99 eigenvalue share
        # takes 7 eigenpairs on 500 points but only 3 on 200 points
        k200 = squared_exponential(np.arange(200.0), 75.0, 100.0)
        assert low_rank_approximate(k200, fraction=0.99).rank == 3
        k500 = squared_exponential(np.arange(500.0), 75.0, 100.0)
        assert low_rank_approximate(k500, fraction=0.99).rank == 7

    def test_fraction_matches_dense_count(self):
        rng = np.random.default_rng(3)
        cov = KroneckerCovariance(random_psd(rng, 3), random_psd(rng, 5))
        ev = np.sort(np.linalg.eigvalsh(cov.dense()))[::-1]
        want = int(np.searchsorted(np.cumsum(ev) / ev.sum(), 0.9) + 1)
        assert low_rank_approximate(cov, fraction=0.9).rank == want

    def test_needs_exactly_one_option(self):
        with pytest.raises(InputError):
            low_rank_approximate(np.eye(3))
        with pytest.raises(InputError):
            low_rank_approximate(np.eye(3), rank=1, fraction=0.5)


def test_check_covariance_rejects_asymmetric():
    with pytest.raises(InputError):
        check_covariance(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_jittered_cholesky_handles_singular():
    m = np.ones((3, 3))
    L = jittered_cholesky(m)
    np.testing.assert_allclose(L @ L.T, m, atol=1e-6)
