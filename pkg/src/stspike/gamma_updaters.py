"""Strategies for refreshing the Gaussian posterior of the latent support field.

Every updater combines the prior N(mu0, Sigma0) with diagonal Gaussian sites
given in natural form (precision ``prec`` >= 0, information ``ptm``) and
returns the posterior mean, the posterior variance diagonal and the log
partition

    log integral N(g | mu0, Sigma0) exp(-g' diag(prec) g / 2 + ptm' g) dg.

Zero site precisions are allowed everywhere: the algebra is written in terms
of ``prec ** 0.5`` (or ``prec / (1 + lam * prec)``) so no site variance is
ever inverted.
"""
from __future__ import annotations

import re
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg

from .errors import InputError, NumericalError
from .kernels import (
    KroneckerCovariance,
    LowRankPlusDiagonal,
    eigendecompose,
    jittered_cholesky,
    kron_matvec,
    low_rank_approximate,
)
from .prior import GammaPriorSpec, GroupMap, build_group_map


class GammaPosterior(NamedTuple):
    mean: np.ndarray
    var: np.ndarray
    log_partition: float


def _check_sites(prec, ptm, n):
    prec = np.asarray(prec, dtype=float)
    ptm = np.asarray(ptm, dtype=float)
    if prec.shape != (n,) or ptm.shape != (n,):
        raise InputError(f"site arrays must have length {n}")
    if np.any(prec < 0) or not (np.all(np.isfinite(prec)) and np.all(np.isfinite(ptm))):
        raise InputError("site precisions must be finite and nonnegative")
    return prec, ptm


def _log_partition(prec, ptm, mu0, delta, logdet_b):
    """Shared tail of the log partition; ``delta`` is posterior mean minus mu0."""
    b = ptm - prec * mu0
    return float(-0.5 * mu0 @ (prec * mu0) + ptm @ mu0 - 0.5 * logdet_b + 0.5 * b @ delta)


def _chol_spd(m):
    try:
        return linalg.cholesky(m, lower=True)
    except linalg.LinAlgError:
        return jittered_cholesky(m, scale=1.0)


def update_gamma_full(prior_cov: np.ndarray, mu0, prec, ptm) -> GammaPosterior:
    """Exact update with B = I + S^1/2 Sigma0 S^1/2, S = diag(prec).

    The posterior covariance is Sigma0 - Sigma0 S^1/2 B^-1 S^1/2 Sigma0 and
    the mean is mu0 + Sigma0 (Sigma0 + Sigma3)^-1 (mu3 - mu0), both written
    without Sigma0^-1 or 1 / prec.
    """
    cov = np.asarray(prior_cov, dtype=float)
    n = cov.shape[0]
    prec, ptm = _check_sites(prec, ptm, n)
    mu0 = np.broadcast_to(np.asarray(mu0, dtype=float), (n,))
    sq = np.sqrt(prec)
    L = _chol_spd(np.eye(n) + sq[:, None] * cov * sq[None, :])
    V = linalg.solve_triangular(L, sq[:, None] * cov, lower=True)
    var = np.diag(cov) - np.sum(V**2, axis=0)
    b = ptm - prec * mu0
    w = cov @ b
    delta = w - V.T @ linalg.solve_triangular(L, sq * w, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return GammaPosterior(mu0 + delta, var, _log_partition(prec, ptm, mu0, delta, logdet))


def update_gamma_lowrank(prior: LowRankPlusDiagonal, mu0, prec, ptm) -> GammaPosterior:
    """Update under Sigma0 ~ U S U' + diag(lam) at O(n K^2).

    With U' = U S^1/2 and E^-1 = prec / (1 + lam prec) the Woodbury identity
    gives (Sigma0 + Sigma3)^-1 = E^-1 - F C^-1 F', F = E^-1 U', C = I + U'' F.
    The variance diagonal of Sigma0 - Sigma0 P Sigma0 is assembled from
    n x K products only.
    """
    lam = np.asarray(prior.diagonal, dtype=float)
    n = lam.shape[0]
    prec, ptm = _check_sites(prec, ptm, n)
    mu0 = np.broadcast_to(np.asarray(mu0, dtype=float), (n,))
    Up = prior.basis * np.sqrt(prior.eigenvalues)
    k = Up.shape[1]
    scale = 1.0 + lam * prec
    einv = prec / scale
    b = ptm - prec * mu0
    r = b / scale
    prior_diag = np.sum(Up**2, axis=1) + lam
    logdet = float(np.sum(np.log(scale)))
    if k == 0:
        p_diag = einv
        h = r
        var = prior_diag - lam**2 * p_diag
        delta = lam * h
        return GammaPosterior(mu0 + delta, var, _log_partition(prec, ptm, mu0, delta, logdet))

    F = einv[:, None] * Up
    G = Up.T @ F
    Lc = _chol_spd(np.eye(k) + G)
    logdet += 2.0 * np.sum(np.log(np.diag(Lc)))
    FC = linalg.cho_solve((Lc, True), F.T).T  # F C^-1
    p_diag = einv - np.sum(FC * F, axis=1)
    M = G - G @ linalg.cho_solve((Lc, True), G)  # U'' P U' = G C^-1
    var = (
        prior_diag
        - lam**2 * p_diag
        - 2.0 * lam * np.sum(FC * Up, axis=1)
        - np.sum((Up @ M) * Up, axis=1)
    )
    h = r - FC @ (Up.T @ r)
    delta = lam * h + Up @ (Up.T @ h)
    return GammaPosterior(mu0 + delta, var, _log_partition(prec, ptm, mu0, delta, logdet))


class KroneckerEigen(NamedTuple):
    ut: np.ndarray
    us: np.ndarray
    s: np.ndarray
    ut2: np.ndarray
    us2: np.ndarray


def kronecker_eigen(cov: KroneckerCovariance) -> KroneckerEigen:
    et, es = eigendecompose(cov.temporal), eigendecompose(cov.spatial)
    s = np.outer(et.eigenvalues, es.eigenvalues).ravel()
    return KroneckerEigen(et.basis, es.basis, s, et.basis**2, es.basis**2)


def update_gamma_common_precision(eig: KroneckerEigen, mu0, prec, ptm) -> GammaPosterior:
    """Replace every site precision by their mean theta inside the inverse.

    Sigma ~ U diag(s / (1 + theta s)) U' with U = U_t (x) U_s, so the
    diagonal is (U_t.^2 (x) U_s.^2) applied to that spectrum, and the mean is
    Sigma ptm + U diag(1 / (1 + theta s)) U' mu0 using the exact site
    information vector. The log partition is that of the surrogate system.
    """
    n = eig.s.shape[0]
    prec, ptm = _check_sites(prec, ptm, n)
    mu0 = np.broadcast_to(np.asarray(mu0, dtype=float), (n,))
    theta = float(np.mean(prec))
    post = eig.s / (1.0 + theta * eig.s)
    var = kron_matvec(eig.ut2, eig.us2, post)

    def rot(v):
        return kron_matvec(eig.ut.T, eig.us.T, v)

    def unrot(v):
        return kron_matvec(eig.ut, eig.us, v)

    b = ptm - theta * mu0
    delta = unrot(post * rot(b))
    logdet = float(np.sum(np.log1p(theta * eig.s)))
    theta_vec = np.full(n, theta)
    return GammaPosterior(mu0 + delta, var, _log_partition(theta_vec, ptm, mu0, delta, logdet))


class GammaUpdater:
    """A configured strategy; precomputation happens once in ``__init__``."""

    name = "base"
    uses_common_precision = False

    def __init__(self, size: int, mean_level: float):
        self.size = size
        self.mu0 = np.full(size, float(mean_level))

    def update(self, prec, ptm) -> GammaPosterior:  # pragma: no cover - interface
        raise NotImplementedError


class FullUpdater(GammaUpdater):
    name = "full"

    def __init__(self, prior: GammaPriorSpec):
        super().__init__(prior.D * prior.T, prior.mean_level)
        self.cov = prior.covariance()

    def update(self, prec, ptm):
        return update_gamma_full(self.cov, self.mu0, prec, ptm)


class LowRankUpdater(GammaUpdater):
    name = "lowrank"

    def __init__(self, prior: GammaPriorSpec, rank: Optional[int] = None, fraction: Optional[float] = None):
        super().__init__(prior.D * prior.T, prior.mean_level)
        src = prior.kronecker() if prior.is_kronecker else prior.covariance()
        self.approx = low_rank_approximate(src, rank=rank, fraction=fraction)

    def update(self, prec, ptm):
        return update_gamma_lowrank(self.approx, self.mu0, prec, ptm)


class CommonPrecisionUpdater(GammaUpdater):
    name = "cp"
    uses_common_precision = True

    def __init__(self, prior: GammaPriorSpec):
        super().__init__(prior.D * prior.T, prior.mean_level)
        if not prior.is_kronecker:
            raise InputError("the common-precision scheme needs a Kronecker prior")
        self.eig = kronecker_eigen(prior.kronecker())

    def update(self, prec, ptm):
        return update_gamma_common_precision(self.eig, self.mu0, prec, ptm)


class GroupedUpdater(GammaUpdater):
    """Member sites are summed per group; the inner strategy runs on G latents.

    Returned mean and variance are gathered back to member positions, so the
    engine can form each member's cavity by removing only its own site.
    """

    name = "group"

    def __init__(self, groups: GroupMap, inner: GammaUpdater):
        super().__init__(groups.D * groups.T, inner.mu0[0] if inner.size else 0.0)
        if inner.size != groups.G:
            raise InputError("inner updater size does not match the group count")
        self.groups = groups
        self.inner = inner
        self.flat_group = groups.flat()
        self.uses_common_precision = inner.uses_common_precision

    def aggregate(self, prec, ptm):
        g, G = self.flat_group, self.groups.G
        return np.bincount(g, weights=prec, minlength=G), np.bincount(g, weights=ptm, minlength=G)

    def update(self, prec, ptm):
        prec, ptm = _check_sites(prec, ptm, self.size)
        gp = self.inner.update(*self.aggregate(prec, ptm))
        g = self.flat_group
        return GammaPosterior(gp.mean[g], gp.var[g], gp.log_partition)


_STRATEGY = re.compile(
    r"^(?:group:(?P<gs>\d+)x(?P<gt>\d+)(?:\+(?P<inner>.+))?|(?P<plain>.+))$"
)


def parse_strategy(text: str) -> dict:
    """Parse ``full | lowrank:<K|frac> | cp | group:<gs>x<gt>[+inner]``."""
    m = _STRATEGY.match(text.strip())
    if m is None:
        raise InputError(f"cannot parse scheme {text!r}")
    out = {"group": None}
    if m.group("gs") is not None:
        out["group"] = (int(m.group("gs")), int(m.group("gt")))
        base = m.group("inner") or "full"
    else:
        base = m.group("plain")
    if base.startswith("group:"):
        raise InputError("grouping can only appear once, at the front")
    if base in ("full", "cp"):
        out["base"], out["rank"], out["fraction"] = base, None, None
        return out
    if base.startswith("lowrank:"):
        arg = base.split(":", 1)[1]
        out["base"] = "lowrank"
        if re.fullmatch(r"\d+", arg):
            out["rank"], out["fraction"] = int(arg), None
        else:
            try:
                out["rank"], out["fraction"] = None, float(arg)
            except ValueError:
                raise InputError(f"bad low-rank target {arg!r}") from None
        return out
    raise InputError(f"unknown scheme {base!r}")


def build_gamma_updater(prior: GammaPriorSpec, scheme: str = "full", groups: Optional[GroupMap] = None) -> GammaUpdater:
    """Construct the updater named by ``scheme`` for this prior."""
    spec = parse_strategy(scheme)
    target = prior
    if spec["group"] is not None and groups is None:
        gs, gt = spec["group"]
        coords = prior.spatial.coords
        times = prior.temporal.coords[:, 0] if prior.temporal.coords is not None else None
        groups = build_group_map(prior.D, prior.T, gs, gt, spatial_coords=coords, times=times)
    if groups is not None:
        target = prior.grouped(groups)

    if spec["base"] == "full":
        inner = FullUpdater(target)
    elif spec["base"] == "cp":
        inner = CommonPrecisionUpdater(target)
    else:
        inner = LowRankUpdater(target, rank=spec["rank"], fraction=spec["fraction"])
    if groups is None:
        return inner
    return GroupedUpdater(groups, inner)


def check_positive(post: GammaPosterior, what: str = "latent field") -> GammaPosterior:
    if not np.all(post.var > 0) or not np.all(np.isfinite(post.mean)):
        bad = int(np.sum(~(post.var > 0)))
        raise NumericalError(f"{what} posterior has {bad} non-positive variances")
    return post
