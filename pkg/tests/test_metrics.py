import itertools

import numpy as np
import pytest

from stspike.errors import InputError
from stspike.metrics import evaluate, f_measure, nmse, omp, oracle_ridge, support_scores


class TestNMSE:
    def test_zero_error(self):
        assert nmse([1.0, -2.0], [1.0, -2.0]) == 0.0

    def test_zero_estimate_is_one(self):
        assert nmse(np.zeros(3), [1.0, 2.0, 3.0]) == 1.0

    def test_value(self):
        assert nmse([1.0, 1.0], [2.0, 0.0]) == pytest.approx(0.5)

    def test_matrix_uses_frobenius(self):
        truth = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert nmse(truth + 0.1, truth) == pytest.approx(0.04 / 2)

    def test_all_zero_truth_rejected(self):
        with pytest.raises(InputError):
            nmse([1.0], [0.0])

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            nmse([1.0, 2.0], [1.0])


class TestFMeasure:
    def test_perfect(self):
        m = f_measure([0.9, 0.1, 0.8], [1.0, 0.0, -2.0])
        assert (m.f_measure, m.precision, m.recall) == (1.0, 1.0, 1.0)
        assert np.isnan(m.nmse)

    def test_half(self):
        # two predicted, one correct; two true, one found
        m = f_measure([0.9, 0.9, 0.1, 0.0], [1.0, 0.0, 1.0, 0.0])
        assert (m.f_measure, m.precision, m.recall) == (0.5, 0.5, 0.5)

    def test_threshold_is_strict(self):
        assert f_measure([0.5], [1.0]).f_measure == 0.0

    def test_empty_supports(self):
        assert support_scores([False, False], [False, False]) == (1.0, 1.0, 1.0)
        assert support_scores([False, False], [True, False])[0] == 0.0

    def test_rejects_probabilities_outside_unit_interval(self):
        with pytest.raises(InputError):
            f_measure([1.2], [1.0])

    def test_evaluate_combines(self):
        m = evaluate([1.0, 0.0], [0.9, 0.2], [2.0, 0.0])
        assert m.f_measure == 1.0 and m.nmse == pytest.approx(0.25)


def residual(A, y, S):
    cols = A[:, sorted(S)]
    return float(np.sum((y - cols @ np.linalg.lstsq(cols, y, rcond=None)[0]) ** 2))


def brute_force_best_support(A, y, K):
    return min((set(S) for S in itertools.combinations(range(A.shape[1]), K)), key=lambda S: residual(A, y, S))


def greedy_reference(A, y, K):
    """Greedy pursuit written with an explicit projector onto the chosen columns."""
    chosen = []
    for _ in range(K):
        P = np.zeros((len(y), len(y)))
        if chosen:
            Q, _ = np.linalg.qr(A[:, chosen])
            P = Q @ Q.T
        r = y - P @ y
        score = np.abs(A.T @ r)
        score[chosen] = -1.0
        chosen.append(int(np.argmax(score)))
    return set(chosen)


class TestOMP:
    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        N, D, K = 8, 12, 2
        for _ in range(20):
            A = rng.standard_normal((N, D))
            A /= np.linalg.norm(A, axis=0)
            x = np.zeros(D)
            x[rng.choice(D, K, replace=False)] = rng.choice([-1, 1], K) * rng.uniform(1, 2, K)
            y = A @ x
            got = set(np.flatnonzero(omp(A, y, K)))
            best = brute_force_best_support(A, y, K)
            assert best == set(np.flatnonzero(x))  # noiseless: the true pair fits exactly
            assert got == greedy_reference(A, y, K)
            assert residual(A, y, got) >= residual(A, y, best) - 1e-12
            if residual(A, y, got) < 1e-20:
                assert got == best

    def test_orthonormal_design(self):
        rng = np.random.default_rng(1)
        Q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
        x = np.array([0, 3.0, 0, 0, -1.0, 0, 0, 0.5, 0, 0])
        np.testing.assert_allclose(omp(Q, Q @ x, 3), x, atol=1e-12)

    def test_support_size_bound(self):
        rng = np.random.default_rng(2)
        A, y = rng.standard_normal((6, 9)), rng.standard_normal(6)
        for K in range(7):
            assert np.count_nonzero(omp(A, y, K)) <= K

    def test_least_squares_refit(self):
        rng = np.random.default_rng(3)
        A, y = rng.standard_normal((8, 5)), rng.standard_normal(8)
        est = omp(A, y, 3)
        S = np.flatnonzero(est)
        # the residual is orthogonal to the selected columns
        np.testing.assert_allclose(A[:, S].T @ (y - A @ est), 0.0, atol=1e-10)

    def test_rejects_bad_k(self):
        with pytest.raises(InputError):
            omp(np.eye(3), np.ones(3), 4)

    def test_rejects_zero_column(self):
        with pytest.raises(InputError):
            omp(np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones(2), 1)


class TestOracleRidge:
    def test_normal_equations(self):
        rng = np.random.default_rng(4)
        A, y = rng.standard_normal((7, 10)), rng.standard_normal(7)
        support = np.zeros(10, bool)
        support[[1, 4, 8]] = True
        est = oracle_ridge(A, y, support, lam=0.1)
        As = A[:, support]
        np.testing.assert_allclose(est[support], np.linalg.solve(As.T @ As + 0.1 * np.eye(3), As.T @ y), rtol=1e-12)
        assert not est[~support].any()

    def test_empty_support(self):
        assert not oracle_ridge(np.eye(3), np.ones(3), np.zeros(3, bool)).any()

    def test_vanishing_ridge_inverts(self):
        rng = np.random.default_rng(5)
        A, y = rng.standard_normal((4, 4)), rng.standard_normal(4)
        est = oracle_ridge(A, y, np.ones(4, bool), lam=1e-12)
        np.testing.assert_allclose(est, np.linalg.solve(A, y), rtol=1e-6)
