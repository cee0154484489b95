import numpy as np
import pytest

from stspike.errors import InputError
from stspike.gamma_updaters import (
    CommonPrecisionUpdater,
    FullUpdater,
    GroupedUpdater,
    build_gamma_updater,
    kronecker_eigen,
    parse_strategy,
    update_gamma_common_precision,
    update_gamma_full,
    update_gamma_lowrank,
)
from stspike.kernels import KroneckerCovariance, low_rank_approximate
from stspike.prior import GammaPriorSpec, KernelFactor, build_group_map


def naive(cov, mu0, prec, ptm):
    """Dense inverse form and Gaussian-integral log partition."""
    n = cov.shape[0]
    mu0 = np.broadcast_to(mu0, (n,))
    P0 = np.linalg.inv(cov)
    post = np.linalg.inv(P0 + np.diag(prec))
    eta = P0 @ mu0 + ptm
    mean = post @ eta
    _, logdet = np.linalg.slogdet(np.eye(n) + cov @ np.diag(prec))
    logz = -0.5 * logdet + 0.5 * eta @ post @ eta - 0.5 * mu0 @ P0 @ mu0
    return mean, np.diag(post), logz


def st_prior(D=4, T=3, mean_level=-0.3, ell=1.5, kappa=2.0, ell_t=1.0):
    return GammaPriorSpec(
        mean_level,
        KernelFactor.se(np.arange(D, dtype=float), ell, kappa),
        KernelFactor.se(np.arange(T, dtype=float), ell_t, 1.0),
    )


def random_sites(rng, n, lo=0.05, hi=3.0):
    return rng.uniform(lo, hi, n), rng.standard_normal(n)


def assert_same(a, b, tol):
    np.testing.assert_allclose(a.mean, b.mean, rtol=0, atol=tol)
    np.testing.assert_allclose(a.var, b.var, rtol=0, atol=tol)
    assert a.log_partition == pytest.approx(b.log_partition, abs=tol * max(1.0, abs(b.log_partition)))


class TestFull:
    def test_identity_prior_unit_sites(self):
        r = update_gamma_full(np.eye(3), 0.0, np.ones(3), np.zeros(3))
        np.testing.assert_allclose(r.var, 0.5)
        np.testing.assert_allclose(r.mean, 0.0)

    def test_uninformative_sites_return_prior(self):
        rng = np.random.default_rng(0)
        B = rng.standard_normal((5, 5))
        cov = B @ B.T + np.eye(5)
        r = update_gamma_full(cov, 0.4, np.zeros(5), np.zeros(5))
        np.testing.assert_allclose(r.mean, 0.4)
        np.testing.assert_allclose(r.var, np.diag(cov))
        assert r.log_partition == 0.0

    def test_against_dense_inverse(self):
        rng = np.random.default_rng(1)
        B = rng.standard_normal((12, 12))
        cov = B @ B.T / 12 + 0.5 * np.eye(12)
        prec, ptm = random_sites(rng, 12)
        mean, var, logz = naive(cov, -0.2, prec, ptm)
        r = update_gamma_full(cov, -0.2, prec, ptm)
        np.testing.assert_allclose(r.mean, mean, atol=1e-10)
        np.testing.assert_allclose(r.var, var, atol=1e-10)
        assert r.log_partition == pytest.approx(logz, abs=1e-10)

    def test_singular_prior_is_allowed(self):
        v = np.array([1.0, 2.0, -1.0])
        cov = np.outer(v, v)
        r = update_gamma_full(cov, 0.0, np.ones(3), np.ones(3))
        # everything lives on span(v): posterior mean is a multiple of v
        np.testing.assert_allclose(np.cross(r.mean, v), 0.0, atol=1e-12)

    def test_rejects_negative_precision(self):
        with pytest.raises(InputError):
            update_gamma_full(np.eye(2), 0.0, np.array([1.0, -1.0]), np.zeros(2))


class TestLowRank:
    def test_full_rank_matches_full(self):
        rng = np.random.default_rng(2)
        prior = st_prior()
        prec, ptm = random_sites(rng, 12)
        full = update_gamma_full(prior.covariance(), prior.mean_level, prec, ptm)
        lr = update_gamma_lowrank(low_rank_approximate(prior.kronecker(), rank=12), prior.mean_level, prec, ptm)
        assert_same(lr, full, 1e-8)

    def test_rank_zero_is_elementwise(self):
        rng = np.random.default_rng(3)
        prior = st_prior()
        prec, ptm = random_sites(rng, 12)
        lam = prior.diag()
        r = update_gamma_lowrank(low_rank_approximate(prior.kronecker(), rank=0), prior.mean_level, prec, ptm)
        var = 1.0 / (1.0 / lam + prec)
        np.testing.assert_allclose(r.var, var, rtol=1e-12)
        np.testing.assert_allclose(r.mean, var * (prior.mean_level / lam + ptm), rtol=1e-12)

    def test_against_dense_approximated_prior(self):
        rng = np.random.default_rng(4)
        prior = st_prior(D=5, T=4)
        approx = low_rank_approximate(prior.kronecker(), fraction=0.9)
        assert 0 < approx.rank < 20
        prec, ptm = random_sites(rng, 20, lo=0.0)
        dense = update_gamma_full(approx.dense(), prior.mean_level, prec, ptm)
        assert_same(update_gamma_lowrank(approx, prior.mean_level, prec, ptm), dense, 1e-9)

    def test_zero_precision_sites(self):
        prior = st_prior()
        approx = low_rank_approximate(prior.kronecker(), rank=4)
        r = update_gamma_lowrank(approx, prior.mean_level, np.zeros(12), np.zeros(12))
        np.testing.assert_allclose(r.var, prior.diag(), rtol=1e-12)


class TestCommonPrecision:
    def test_equal_precisions_are_exact(self):
        rng = np.random.default_rng(6)
        prior = st_prior(D=12, T=4)
        ptm = rng.standard_normal(48)
        prec = np.full(48, 0.7)
        full = update_gamma_full(prior.covariance(), prior.mean_level, prec, ptm)
        cp = update_gamma_common_precision(kronecker_eigen(prior.kronecker()), prior.mean_level, prec, ptm)
        assert_same(cp, full, 1e-10)

    def test_identity_factors(self):
        eig = kronecker_eigen(KroneckerCovariance(np.eye(2), np.eye(3)))
        r = update_gamma_common_precision(eig, 0.0, np.ones(6), np.zeros(6))
        np.testing.assert_allclose(r.var, 0.5)
        np.testing.assert_allclose(r.mean, 0.0)

    def test_heterogeneous_matches_surrogate(self):
        rng = np.random.default_rng(7)
        prior = st_prior(D=5, T=3)
        prec, ptm = random_sites(rng, 15)
        surrogate = update_gamma_full(prior.covariance(), prior.mean_level, np.full(15, prec.mean()), ptm)
        cp = CommonPrecisionUpdater(prior).update(prec, ptm)
        assert_same(cp, surrogate, 1e-10)


class TestGrouped:
    def test_unit_groups_match_full(self):
        rng = np.random.default_rng(8)
        prior = st_prior()
        prec, ptm = random_sites(rng, 12)
        g = build_gamma_updater(prior, "group:1x1")
        assert isinstance(g, GroupedUpdater)
        assert_same(g.update(prec, ptm), FullUpdater(prior).update(prec, ptm), 1e-10)

    def test_group_system_size(self):
        prior = st_prior(D=4, T=2)
        g = build_gamma_updater(prior, "group:2x2")
        assert g.inner.size == 2

    @pytest.mark.parametrize("gs,gt,inner", [(2, 1, "full"), (2, 2, "full"), (3, 3, "full"), (2, 2, "lowrank:1.0")])
    def test_duplicated_covariance_oracle(self, gs, gt, inner):
        rng = np.random.default_rng(9)
        prior = st_prior(D=5, T=3)
        groups = build_group_map(5, 3, gs, gt)
        prec, ptm = random_sites(rng, 15)
        grouped = build_gamma_updater(prior, f"group:{gs}x{gt}+{inner}").update(prec, ptm)
        cg = prior.grouped(groups).covariance()
        member = groups.flat()
        dup = cg[np.ix_(member, member)]
        oracle = update_gamma_full(dup, prior.mean_level, prec, ptm)
        assert_same(grouped, oracle, 1e-9)

    def test_aggregate_sums_members(self):
        prior = st_prior(D=4, T=2)
        g = build_gamma_updater(prior, "group:2x1")
        p, h = g.aggregate(np.arange(8.0), np.ones(8))
        np.testing.assert_array_equal(p, [1.0, 5.0, 9.0, 13.0])
        np.testing.assert_array_equal(h, [2.0, 2.0, 2.0, 2.0])


class TestStrategyParsing:
    @pytest.mark.parametrize(
        "text,want",
        [
            ("full", {"group": None, "base": "full", "rank": None, "fraction": None}),
            ("cp", {"group": None, "base": "cp", "rank": None, "fraction": None}),
            ("lowrank:7", {"group": None, "base": "lowrank", "rank": 7, "fraction": None}),
            ("lowrank:0.99", {"group": None, "base": "lowrank", "rank": None, "fraction": 0.99}),
            ("group:5x10", {"group": (5, 10), "base": "full", "rank": None, "fraction": None}),
            ("group:2x1+cp", {"group": (2, 1), "base": "cp", "rank": None, "fraction": None}),
        ],
    )
    def test_parse(self, text, want):
        assert parse_strategy(text) == want

    @pytest.mark.parametrize("text", ["dense", "lowrank:x", "group:2x2+group:1x1", ""])
    def test_rejects(self, text):
        with pytest.raises(InputError):
            parse_strategy(text)

    def test_cp_needs_kronecker(self):
        dense = GammaPriorSpec(0.0, KernelFactor.identity(2), KernelFactor.identity(1), dense=np.eye(2))
        with pytest.raises(InputError):
            build_gamma_updater(dense, "cp")
