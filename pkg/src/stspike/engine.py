"""Parallel EP for the spatio-temporal spike-and-slab model.

Per iteration: (probit only) refresh the likelihood sites, refresh all
spike-and-slab sites and the global approximation of X, then refresh all
Bernoulli-probit sites and the latent field Gamma through the configured
updater. All site arrays are D x T (N x T for likelihood sites); Gamma
updaters work on the time-slowest flattening.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import InputError, NumericalError
from .gamma_updaters import GammaPosterior, GammaUpdater, build_gamma_updater, check_positive
from .kernels import jittered_cholesky
from .likelihoods import (
    GAUSSIAN,
    F1Naturals,
    Problem,
    gaussian_f1_naturals,
    probit_f1_naturals,
    probit_sweep,
    probit_tilted_moments,
)
from .moments import (
    cavity_gaussian,
    damp_log_odds,
    log_bernoulli_site_mass,
    log_gaussian_site_mass,
    moments_f2,
    moments_f3,
    site_update_from_moments,
)
from .prior import GammaPriorSpec, GroupMap, SlabParams

log = logging.getLogger(__name__)
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EPConfig:
    damping: float = 0.5
    max_iters: int = 200
    tol: float = 1e-6
    evidence_tol: float = 1e-8
    v_inf: float = 1e2
    sigma_inf: float = 1e6
    init_site_var: float = 1e4
    cp_inner_repeats: int = 5
    cp_damping_decay: float = 0.9
    cp_decay_after: int = 100
    scheme: str = "full"

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise InputError("damping must lie in (0, 1]")
        if self.max_iters < 1 or not self.tol > 0 or not self.init_site_var > 0:
            raise InputError("max_iters, tol and init_site_var must be positive")
        if not (self.v_inf > 0 and self.sigma_inf > 0):
            raise InputError("clamp variances must be positive")


@dataclass
class SiteStore:
    f2_prec: np.ndarray
    f2_ptm: np.ndarray
    f2_log_odds: np.ndarray
    f3_prec: np.ndarray
    f3_ptm: np.ndarray
    f3_log_odds: np.ndarray
    f1_prec: Optional[np.ndarray] = None
    f1_ptm: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, D: int, T: int, init_var: float, N: Optional[int] = None) -> "SiteStore":
        z = np.zeros((D, T))
        f1 = (np.zeros((N, T)), np.zeros((N, T))) if N is not None else (None, None)
        return cls(np.full((D, T), 1.0 / init_var), z.copy(), z.copy(), np.full((D, T), 1.0 / init_var), z.copy(), z.copy(), *f1)

    def copy(self) -> "SiteStore":
        return SiteStore(**{k: (None if v is None else v.copy()) for k, v in self.__dict__.items()})

    def max_change(self, other: "SiteStore") -> float:
        out = 0.0
        for k, v in self.__dict__.items():
            if v is not None:
                out = max(out, float(np.max(np.abs(v - getattr(other, k)))))
        return out


class XMarginals(NamedTuple):
    mean: np.ndarray
    var: np.ndarray
    log_partition: float
    proj_mean: Optional[np.ndarray] = None
    proj_var: Optional[np.ndarray] = None


def update_global_x(f1: F1Naturals, site_prec, site_ptm, need_projections: bool = False) -> XMarginals:
    """Marginals of the Gaussian product of one likelihood term and diagonal sites.

    With V2 = diag(1 / site_prec) and W = Theta^1/2 A the matrix inversion
    lemma gives the posterior covariance V2 - V2 W' B^-1 W V2 with
    B = I + W V2 W' (N x N). Only its diagonal is formed, at O(N^2 D). When
    D <= N the D x D precision is factored directly instead.

    ``log_partition`` is log of the integral of the product over x, including
    the constant of the likelihood term.
    """
    A = f1.A
    N, D = A.shape
    prec = np.asarray(site_prec, dtype=float)
    if np.any(prec <= 0) or not np.all(np.isfinite(prec)):
        raise NumericalError("spike-and-slab site precisions must be finite and positive")
    eta = A.T @ f1.h + site_ptm
    proj_mean = proj_var = None
    if D <= N:
        P = A.T @ (f1.theta[:, None] * A)
        P[np.diag_indices(D)] += prec
        try:
            L = linalg.cholesky(P, lower=True)
        except linalg.LinAlgError:
            L = jittered_cholesky(P)
        Linv = linalg.solve_triangular(L, np.eye(D), lower=True)
        var = np.sum(Linv**2, axis=0)
        mean = linalg.cho_solve((L, True), eta)
        logdet_p = 2.0 * np.sum(np.log(np.diag(L)))
        if need_projections:
            R = Linv @ A.T
            proj_var = np.sum(R**2, axis=0)
    else:
        v2 = 1.0 / prec
        W = np.sqrt(f1.theta)[:, None] * A
        K = (W * v2) @ W.T
        K[np.diag_indices(N)] += 1.0
        try:
            L = linalg.cholesky(K, lower=True)
        except linalg.LinAlgError:
            L = jittered_cholesky(K)
        R = linalg.solve_triangular(L, W, lower=True)
        var = v2 - v2**2 * np.sum(R**2, axis=0)
        v2eta = v2 * eta
        mean = v2eta - v2 * (R.T @ (R @ v2eta))
        logdet_p = float(-np.sum(np.log(v2)) + 2.0 * np.sum(np.log(np.diag(L))))
        if need_projections:
            Kp = (A * v2) @ A.T
            sq = np.sqrt(f1.theta)
            Q = linalg.solve_triangular(L, sq[:, None] * Kp, lower=True)
            proj_var = np.diag(Kp) - np.sum(Q**2, axis=0)
    if need_projections:
        proj_mean = A @ mean
    log_part = f1.log_const + 0.5 * D * _LOG_2PI - 0.5 * logdet_p + 0.5 * float(eta @ mean)
    if not np.all(var > 0):
        raise NumericalError(f"{int(np.sum(var <= 0))} non-positive marginal variances for x")
    return XMarginals(mean, var, float(log_part), proj_mean, proj_var)


@dataclass
class EPResult:
    x_mean: np.ndarray
    x_var: np.ndarray
    support_prob: np.ndarray
    gamma_mean: np.ndarray
    gamma_var: np.ndarray
    log_evidence: float
    iterations: int
    converged: bool
    evidence_trace: list = field(default_factory=list)
    change_trace: list = field(default_factory=list)
    site_change_trace: list = field(default_factory=list)
    sites: Optional[SiteStore] = None
    config: Optional[EPConfig] = None
    skipped_sites: int = 0

    def summary(self) -> dict:
        return {
            "log_evidence": self.log_evidence,
            "iterations": self.iterations,
            "converged": self.converged,
            "skipped_sites": self.skipped_sites,
            "ep_config": asdict(self.config) if self.config is not None else None,
        }


def _flat(a: np.ndarray) -> np.ndarray:
    return a.T.ravel()


def _unflat(v: np.ndarray, D: int, T: int) -> np.ndarray:
    return v.reshape(T, D).T


class _Engine:
    def __init__(self, problem: Problem, prior: GammaPriorSpec, slab: SlabParams, config: EPConfig,
                 groups: Optional[GroupMap], updater: Optional[GammaUpdater], site_order):
        if prior.D != problem.D:
            raise InputError(f"prior has D={prior.D}, forward model has D={problem.D}")
        if prior.T != problem.T:
            raise InputError(f"prior has T={prior.T}, observations have T={problem.T}")
        self.problem, self.prior, self.slab, self.cfg = problem, prior, slab, config
        self.D, self.T, self.N = problem.D, problem.T, problem.N
        self.probit = problem.likelihood != GAUSSIAN
        self.updater = updater if updater is not None else build_gamma_updater(prior, config.scheme, groups)
        self.order = None if site_order is None else np.asarray(site_order)
        if self.order is not None and sorted(self.order.tolist()) != list(range(self.D * self.T)):
            raise InputError("site_order must be a permutation of range(D * T)")
        self.damping = config.damping
        self.sites = SiteStore.initial(self.D, self.T, config.init_site_var, self.N if self.probit else None)
        self.skipped = 0

    # -- per-column likelihood terms
    def _f1(self, t: int) -> F1Naturals:
        p = self.problem
        if not self.probit:
            return gaussian_f1_naturals(p.A, p.Y[:, t], float(p.noise_variance[t]))
        return probit_f1_naturals(p.A, self.sites.f1_prec[:, t], self.sites.f1_ptm[:, t])

    def refresh_x(self):
        cols = [update_global_x(self._f1(t), self.sites.f2_prec[:, t], self.sites.f2_ptm[:, t], self.probit)
                for t in range(self.T)]
        self.x = cols
        self.x_mean = np.stack([c.mean for c in cols], axis=1)
        self.x_var = np.stack([c.var for c in cols], axis=1)

    def refresh_gamma(self):
        s = self.sites
        post = self.updater.update(_flat(s.f3_prec), _flat(s.f3_ptm))
        self.gamma = check_positive(post)
        self.g_mean = _unflat(post.mean, self.D, self.T)
        self.g_var = _unflat(post.var, self.D, self.T)

    # -- the ordering hook only permutes where each entry is computed
    def _perm(self, a):
        return a if self.order is None else _flat(a)[self.order]

    def _unperm(self, v):
        if self.order is None:
            return v
        out = np.empty(self.D * self.T)
        out[self.order] = v
        return _unflat(out, self.D, self.T)

    # -- site families
    def sweep_f1(self):
        s = self.sites
        pm = np.stack([c.proj_mean for c in self.x], axis=1)
        pv = np.stack([c.proj_var for c in self.x], axis=1)
        res = probit_sweep(s.f1_prec, s.f1_ptm, pm, pv, self.problem.Y, self.damping)
        s.f1_prec, s.f1_ptm = res.precision, res.precision_times_mean
        self.skipped += int(np.sum(~res.updated))

    def _floor_f2(self, prec):
        # keeps V2 = 1 / prec bounded inside the x update
        return np.maximum(prec, 1.0 / self.cfg.init_site_var)

    def sweep_f2(self):
        s, P = self.sites, self._perm
        cav = cavity_gaussian(P(1.0 / self.x_var), P(self.x_mean / self.x_var), P(s.f2_prec), P(s.f2_ptm))
        ok = cav.valid
        m = np.where(ok, cav.mean, 0.0)
        v = np.where(ok, cav.var, 1.0)
        mom = moments_f2(m, v, slab=self.slab, cav_log_odds=P(s.f3_log_odds))
        prec, ptm = site_update_from_moments(mom.mean, mom.var, m, v, P(s.f2_prec), P(s.f2_ptm), self.damping, self.cfg.v_inf)
        lo = damp_log_odds(P(s.f2_log_odds), mom.site_log_odds, self.damping)
        s.f2_prec = self._floor_f2(self._unperm(np.where(ok, prec, P(s.f2_prec))))
        s.f2_ptm = self._unperm(np.where(ok, ptm, P(s.f2_ptm)))
        s.f2_log_odds = self._unperm(np.where(ok, lo, P(s.f2_log_odds)))
        self.skipped += int(np.sum(~ok))

    def sweep_f3(self):
        s, P = self.sites, self._perm
        cav = cavity_gaussian(P(1.0 / self.g_var), P(self.g_mean / self.g_var), P(s.f3_prec), P(s.f3_ptm))
        m = np.where(cav.valid, cav.mean, 0.0)
        v = np.where(cav.valid, cav.var, 1.0)
        mom = moments_f3(m, v, cav_log_odds=P(s.f2_log_odds), strict=False)
        ok = cav.valid & np.isfinite(mom.mean) & np.isfinite(mom.var) & (mom.var > 0)
        prec, ptm = site_update_from_moments(mom.mean, mom.var, m, v, P(s.f3_prec), P(s.f3_ptm), self.damping, self.cfg.sigma_inf)
        lo = damp_log_odds(P(s.f3_log_odds), mom.site_log_odds, self.damping)
        s.f3_prec = self._unperm(np.where(ok, prec, P(s.f3_prec)))
        s.f3_ptm = self._unperm(np.where(ok, ptm, P(s.f3_ptm)))
        s.f3_log_odds = self._unperm(np.where(ok, lo, P(s.f3_log_odds)))
        self.skipped += int(np.sum(~ok))

    def snapshot(self):
        s = self.sites
        return (self.x_mean, self.x_var, self.g_mean, self.g_var, s.f2_log_odds + s.f3_log_odds)

    def max_global_change(self, snap) -> float:
        """Largest change of any marginal mean, variance or support probability."""
        now = self.snapshot()
        out = max(float(np.max(np.abs(a - b))) for a, b in zip(now[:4], snap[:4]))
        prob = lambda lo: 1.0 / (1.0 + np.exp(-lo))  # noqa: E731
        return max(out, float(np.max(np.abs(prob(now[4]) - prob(snap[4])))))

    # -- evidence
    def log_evidence(self) -> float:
        return log_marginal_likelihood(self.sites, self.x, self.x_mean, self.x_var, self.gamma, self.g_mean,
                                       self.g_var, self.slab, self.problem if self.probit else None)

    def result(self, iterations, converged, trace, changes, site_changes) -> EPResult:
        s = self.sites
        prob = 1.0 / (1.0 + np.exp(-(s.f2_log_odds + s.f3_log_odds)))
        return EPResult(
            self.x_mean, self.x_var, prob, self.g_mean, self.g_var,
            trace[-1] if trace else float("nan"), iterations, converged, trace, changes, site_changes,
            s.copy(), self.cfg, self.skipped,
        )


def log_marginal_likelihood(
    sites: SiteStore,
    x_cols: Sequence[XMarginals],
    x_mean,
    x_var,
    gamma: GammaPosterior,
    g_mean,
    g_var,
    slab: SlabParams,
    probit_problem: Optional[Problem] = None,
) -> float:
    """EP approximation of log p(Y) from the current sites.

    log Z = log of the integral of the product of all (unnormalized) sites and
    the prior, plus one log scale per site that makes the site integrate
    against its cavity to the tilted normalizer. Sites with an invalid
    cavity contribute no scale term.
    """
    s = sites
    total = sum(c.log_partition for c in x_cols)
    total += float(np.sum(np.logaddexp(0.0, s.f2_log_odds + s.f3_log_odds)))
    total += gamma.log_partition

    cav = cavity_gaussian(1.0 / x_var, x_mean / x_var, s.f2_prec, s.f2_ptm)
    ok = cav.valid
    if np.any(ok):
        m, v = cav.mean[ok], cav.var[ok]
        mom = moments_f2(m, v, slab=slab, cav_log_odds=s.f3_log_odds[ok])
        total += float(np.sum(
            mom.log_z
            - log_gaussian_site_mass(s.f2_prec[ok], s.f2_ptm[ok], m, v)
            - log_bernoulli_site_mass(s.f2_log_odds[ok], s.f3_log_odds[ok])
        ))

    cav = cavity_gaussian(1.0 / g_var, g_mean / g_var, s.f3_prec, s.f3_ptm)
    ok = cav.valid
    if np.any(ok):
        m, v = cav.mean[ok], cav.var[ok]
        mom = moments_f3(m, v, cav_log_odds=s.f2_log_odds[ok], strict=False)
        total += float(np.sum(
            mom.log_z
            - log_gaussian_site_mass(s.f3_prec[ok], s.f3_ptm[ok], m, v)
            - log_bernoulli_site_mass(s.f3_log_odds[ok], s.f2_log_odds[ok])
        ))

    if probit_problem is not None:
        pm = np.stack([c.proj_mean for c in x_cols], axis=1)
        pv = np.stack([c.proj_var for c in x_cols], axis=1)
        cav = cavity_gaussian(1.0 / pv, pm / pv, s.f1_prec, s.f1_ptm)
        ok = cav.valid
        if np.any(ok):
            m, v = cav.mean[ok], cav.var[ok]
            mom = probit_tilted_moments(m, v, probit_problem.Y[ok])
            total += float(np.sum(mom.log_z - log_gaussian_site_mass(s.f1_prec[ok], s.f1_ptm[ok], m, v)))

    if not math.isfinite(total):
        raise NumericalError("log evidence is not finite")
    return total


def run_ep(
    problem: Problem,
    prior: GammaPriorSpec,
    slab: SlabParams = SlabParams(),
    config: EPConfig = EPConfig(),
    groups: Optional[GroupMap] = None,
    updater: Optional[GammaUpdater] = None,
    site_order: Optional[Sequence[int]] = None,
) -> EPResult:
    """Run parallel EP to convergence or ``config.max_iters``.

    Convergence: the largest absolute change of any marginal mean, marginal
    variance or support probability drops below ``tol``, or the log evidence
    changes by less than ``evidence_tol``. Site naturals are not used for
    this test because spike sites drift towards infinite precision as their
    support probability vanishes; their changes are kept in
    ``site_change_trace``. Without convergence the state after the last sweep is
    returned with ``converged=False``. ``site_order`` permutes the flat
    positions at which the parallel site refreshes are computed; results do
    not depend on it.
    """
    eng = _Engine(problem, prior, slab, config, groups, updater, site_order)
    cfg = eng.cfg
    eng.refresh_x()
    eng.refresh_gamma()
    repeats = cfg.cp_inner_repeats if eng.updater.uses_common_precision else 1
    trace, changes, site_changes = [], [], []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        before = eng.sites.copy()
        snap = eng.snapshot()
        if eng.probit:
            eng.sweep_f1()
            eng.refresh_x()
        eng.sweep_f2()
        eng.refresh_x()
        for _ in range(repeats):
            eng.sweep_f3()
            eng.refresh_gamma()
        ev = eng.log_evidence()
        change = eng.max_global_change(snap)
        site_change = eng.sites.max_change(before)
        if (eng.updater.uses_common_precision and it > cfg.cp_decay_after and trace and ev < trace[-1]):
            eng.damping *= cfg.cp_damping_decay
        trace.append(ev)
        changes.append(change)
        site_changes.append(site_change)
        log.debug("iter %d  log Z %.10g  change %.3g  site change %.3g", it, ev, change, site_change)
        if change < cfg.tol or (len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.evidence_tol):
            converged = True
            break
    return eng.result(it, converged, trace, changes, site_changes)
