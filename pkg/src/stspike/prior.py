"""Hierarchical spike-and-slab prior with a Gaussian-process latent support field.

x_{i,t} | z_{i,t} ~ (1 - z) delta_0 + z N(rho0, tau0)
z_{i,t} | gamma   ~ Bernoulli(Phi(gamma_{i,t}))
vec(gamma)        ~ N(nu0 * 1, temporal (x) spatial)
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .errors import InputError, NumericalError
from .kernels import (
    KroneckerCovariance,
    ar1_temporal_kernel,
    check_covariance,
    jittered_cholesky,
    squared_exponential,
)


@dataclass(frozen=True)
class SlabParams:
    slab_mean: float = 0.0
    slab_variance: float = 1.0

    def __post_init__(self):
        if not self.slab_variance > 0:
            raise InputError("slab variance must be positive")


@dataclass(frozen=True)
class KernelFactor:
    """One factor of the Kronecker prior covariance.

    ``kind`` is one of ``"se"`` (squared exponential on ``coords``), ``"ar1"``
    (``alpha**|t-t'|`` on the times in ``coords``), ``"diag"``
    (``magnitude * I``) or ``"matrix"`` (fixed ``values``). Everything except
    ``"matrix"`` can be re-evaluated at new coordinates, which is what
    grouping needs.
    """

    kind: str
    size: int
    coords: Optional[np.ndarray] = None
    lengthscale: float = 1.0
    magnitude: float = 1.0
    alpha: float = 0.0
    values: Optional[np.ndarray] = None

    @classmethod
    def se(cls, coords, lengthscale: float, magnitude: float = 1.0) -> "KernelFactor":
        pts = np.asarray(coords, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls("se", pts.shape[0], pts, float(lengthscale), float(magnitude))

    @classmethod
    def ar1(cls, alpha: float, T: int, times=None) -> "KernelFactor":
        t = np.arange(T, dtype=float) if times is None else np.asarray(times, dtype=float)
        if not 0.0 <= alpha < 1.0:
            raise InputError("alpha must lie in [0, 1)")
        return cls("ar1", t.shape[0], t[:, None], alpha=float(alpha))

    @classmethod
    def diagonal(cls, n: int, magnitude: float = 1.0) -> "KernelFactor":
        return cls("diag", int(n), np.arange(n, dtype=float)[:, None], magnitude=float(magnitude))

    @classmethod
    def identity(cls, n: int) -> "KernelFactor":
        return cls.diagonal(n, 1.0)

    @classmethod
    def fixed(cls, matrix) -> "KernelFactor":
        m = check_covariance(matrix)
        return cls("matrix", m.shape[0], values=m)

    def matrix(self) -> np.ndarray:
        if self.kind == "se":
            return squared_exponential(self.coords, self.lengthscale, self.magnitude)
        if self.kind == "ar1":
            return ar1_temporal_kernel(self.alpha, self.size, times=self.coords[:, 0])
        if self.kind == "diag":
            return self.magnitude * np.eye(self.size)
        if self.kind == "matrix":
            return np.array(self.values, dtype=float)
        raise InputError(f"unknown kernel kind {self.kind!r}")

    def at(self, coords) -> "KernelFactor":
        """The same kernel evaluated on other coordinates (e.g. group centroids)."""
        pts = np.asarray(coords, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if self.kind == "matrix":
            if pts.shape[0] == self.size and self.coords is None:
                return self
            raise InputError("a fixed covariance matrix cannot be re-evaluated at group centroids")
        return replace(self, size=pts.shape[0], coords=pts)


@dataclass(frozen=True)
class GammaPriorSpec:
    """Prior N(nu0 * 1, temporal (x) spatial) on the D x T latent field.

    A non-Kronecker DT x DT covariance can be supplied through ``dense``; it
    then replaces the factors for all dense computations.
    """

    mean_level: float
    spatial: KernelFactor
    temporal: KernelFactor
    dense: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dense is not None:
            d = check_covariance(self.dense, "dense prior covariance")
            if d.shape[0] != self.D * self.T:
                raise InputError("dense prior covariance must be (D*T) x (D*T)")

    @property
    def D(self) -> int:
        return self.spatial.size

    @property
    def T(self) -> int:
        return self.temporal.size

    @property
    def is_kronecker(self) -> bool:
        return self.dense is None

    def kronecker(self) -> KroneckerCovariance:
        if not self.is_kronecker:
            raise InputError("prior has no Kronecker structure")
        return KroneckerCovariance(self.temporal.matrix(), self.spatial.matrix())

    def covariance(self) -> np.ndarray:
        if self.dense is not None:
            return np.array(self.dense, dtype=float)
        return self.kronecker().dense()

    def diag(self) -> np.ndarray:
        if self.dense is not None:
            return np.diag(self.dense).copy()
        return self.kronecker().diag()

    def grouped(self, groups: "GroupMap") -> "GammaPriorSpec":
        """Prior over group-level latents: kernels evaluated at group centroids."""
        if groups.D != self.D or groups.T != self.T:
            raise InputError("group map does not match prior dimensions")
        if self.dense is not None:
            if groups.G == self.D * self.T:
                return self
            raise InputError("grouping needs a Kronecker prior built from kernels")
        return GammaPriorSpec(
            self.mean_level,
            self.spatial.at(groups.spatial_centroids),
            self.temporal.at(groups.temporal_centroids),
        )

    @classmethod
    def independent(cls, D: int, T: int = 1, mean_level: float = 0.0, magnitude: float = 1.0) -> "GammaPriorSpec":
        """Diagonal prior: recovers the conventional spike-and-slab model."""
        return cls(mean_level, KernelFactor.diagonal(D, magnitude), KernelFactor.identity(T))


@dataclass(frozen=True)
class GroupMap:
    """Contiguous block grouping of (i, t) onto G = Gs * Gt shared latents.

    Group index ``g = tg * Gs + ig`` matches the flattening of the grouped
    Kronecker prior.
    """

    group_of: np.ndarray
    spatial_group_size: int
    temporal_group_size: int
    spatial_centroids: np.ndarray
    temporal_centroids: np.ndarray

    @property
    def D(self) -> int:
        return self.group_of.shape[0]

    @property
    def T(self) -> int:
        return self.group_of.shape[1]

    @property
    def Gs(self) -> int:
        return self.spatial_centroids.shape[0]

    @property
    def Gt(self) -> int:
        return self.temporal_centroids.shape[0]

    @property
    def G(self) -> int:
        return self.Gs * self.Gt

    def flat(self) -> np.ndarray:
        """Group index for each flat (time-slowest) position."""
        return self.group_of.T.ravel()

    def is_identity(self) -> bool:
        return self.G == self.D * self.T


def build_group_map(
    D: int,
    T: int,
    spatial_group_size: int = 1,
    temporal_group_size: int = 1,
    spatial_coords=None,
    times=None,
) -> GroupMap:
    if spatial_group_size < 1 or temporal_group_size < 1:
        raise InputError("group sizes must be >= 1")
    pts = np.arange(D, dtype=float)[:, None] if spatial_coords is None else np.asarray(spatial_coords, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    tt = np.arange(T, dtype=float) if times is None else np.asarray(times, dtype=float).ravel()
    if pts.shape[0] != D or tt.shape[0] != T:
        raise InputError("coordinate arrays do not match D, T")
    ig = np.arange(D) // spatial_group_size
    tg = np.arange(T) // temporal_group_size
    Gs, Gt = int(ig[-1]) + 1, int(tg[-1]) + 1
    group_of = tg[None, :] * Gs + ig[:, None]
    s_cent = np.stack([pts[ig == g].mean(axis=0) for g in range(Gs)])
    t_cent = np.array([tt[tg == g].mean() for g in range(Gt)])
    return GroupMap(group_of, spatial_group_size, temporal_group_size, s_cent, t_cent)


@dataclass(frozen=True)
class PriorSample:
    gamma: np.ndarray
    support: np.ndarray
    coefficients: np.ndarray
    seed: Optional[int] = None
    mean_shift: float = 0.0
    tries: int = 1
    exact: bool = True


def marginal_activation_prob(mu, var):
    """P(z = 1) = Phi(mu / sqrt(1 + var)) for gamma ~ N(mu, var)."""
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise InputError("variance must be nonnegative")
    return ndtr(np.asarray(mu, dtype=float) / np.sqrt(1.0 + var))


def joint_activation_prob_mc(prior: GammaPriorSpec, i: int, j: int, samples: int = 10_000, seed=None):
    """Monte Carlo estimate of P(z_i = 1, z_j = 1) with its standard error.

    ``i`` and ``j`` are flat (time-slowest) indices. The integrand
    Phi(gamma_i) Phi(gamma_j) is averaged over exact draws of the bivariate
    marginal of gamma; for ``i == j`` this is P(z_i = 1) itself.
    """
    if samples < 1000:
        raise InputError("use at least 1000 samples")
    if prior.dense is not None:
        c = prior.dense
        cov = np.array([[c[i, i], c[i, j]], [c[j, i], c[j, j]]])
    else:
        kt, ks = prior.temporal.matrix(), prior.spatial.matrix()
        (ti, si), (tj, sj) = divmod(i, prior.D), divmod(j, prior.D)
        cov = np.array(
            [[kt[ti, ti] * ks[si, si], kt[ti, tj] * ks[si, sj]], [kt[tj, ti] * ks[sj, si], kt[tj, tj] * ks[sj, sj]]]
        )
    rng = np.random.default_rng(seed)
    w, v = np.linalg.eigh(cov)
    if w[0] < -1e-10 * max(w[-1], 1.0):
        raise NumericalError("marginal covariance is not PSD")
    root = v * np.sqrt(np.clip(w, 0.0, None))
    g = prior.mean_level + rng.standard_normal((samples, 2)) @ root.T
    if i == j:
        vals = ndtr(g[:, 0])
    else:
        vals = ndtr(g[:, 0]) * ndtr(g[:, 1])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples))


class _GammaSampler:
    """Reusable square-root factors for repeated draws of gamma."""

    def __init__(self, prior: GammaPriorSpec):
        self.D, self.T = prior.D, prior.T
        if prior.is_kronecker:
            self.lt = self._root(prior.temporal)
            self.ls = self._root(prior.spatial)
            self.l = None
        else:
            self.l = jittered_cholesky(prior.covariance())

    @staticmethod
    def _root(factor: KernelFactor):
        # a diagonal factor is kept as a scalar square root
        if factor.kind == "diag":
            return math.sqrt(factor.magnitude)
        return jittered_cholesky(factor.matrix())

    @staticmethod
    def _apply(root, m):
        return root * m if isinstance(root, float) else root @ m

    def draw(self, rng: np.random.Generator, mean: float) -> np.ndarray:
        eps = rng.standard_normal((self.D, self.T))
        if self.l is None:
            return mean + self._apply(self.lt, self._apply(self.ls, eps).T).T
        flat = self.l @ eps.T.ravel()
        return mean + flat.reshape(self.T, self.D).T


def _draw(sampler, rng, mean):
    gamma = sampler.draw(rng, mean)
    u = rng.random(gamma.shape)
    support = (u < ndtr(gamma)).astype(np.int8)
    return gamma, support


def _coefficients(rng, support, slab: SlabParams):
    c = slab.slab_mean + math.sqrt(slab.slab_variance) * rng.standard_normal(support.shape)
    return np.where(support == 1, c, 0.0)


def sample_prior(prior: GammaPriorSpec, slab: SlabParams, D: Optional[int] = None, T: Optional[int] = None, seed=None) -> PriorSample:
    """Draw (gamma, z, x) from the generative hierarchy; deterministic given ``seed``."""
    _check_dims(prior, D, T)
    rng = np.random.default_rng(seed)
    gamma, support = _draw(_GammaSampler(prior), rng, prior.mean_level)
    return PriorSample(gamma, support, _coefficients(rng, support, slab), seed=seed)


def _check_dims(prior, D, T):
    if (D is not None and D != prior.D) or (T is not None and T != prior.T):
        raise InputError(f"prior is {prior.D} x {prior.T}, requested {D} x {T}")


def _mean_shift_for(prior: GammaPriorSpec, K: int) -> float:
    """Shift delta such that sum_j Phi((nu0 + delta) / sqrt(1 + Sigma_jj)) = K."""
    scale = np.sqrt(1.0 + prior.diag())

    def excess(delta):
        return float(np.sum(ndtr((prior.mean_level + delta) / scale)) - K)

    lo, hi = -1.0, 1.0
    while excess(lo) > 0:
        lo *= 2.0
    while excess(hi) < 0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def sample_prior_conditioned(
    prior: GammaPriorSpec,
    slab: SlabParams,
    K: int,
    D: Optional[int] = None,
    T: Optional[int] = None,
    seed=None,
    max_tries: int = 10_000,
) -> PriorSample:
    """Prior sample whose coefficient matrix has exactly ``K`` nonzeros.

    The latent mean is shifted so that the expected support size equals K,
    then draws are rejected until the cardinality matches. The spatial
    correlation of the prior is kept intact. When ``max_tries`` runs out the
    draw with the closest cardinality is returned with ``exact=False``.
    """
    _check_dims(prior, D, T)
    n = prior.D * prior.T
    if not 0 <= K <= n:
        raise InputError(f"K must lie in [0, {n}]")
    rng = np.random.default_rng(seed)
    sampler = _GammaSampler(prior)
    if K in (0, n):
        gamma = sampler.draw(rng, prior.mean_level)
        support = np.full(gamma.shape, 1 if K == n else 0, dtype=np.int8)
        return PriorSample(gamma, support, _coefficients(rng, support, slab), seed=seed)

    delta = _mean_shift_for(prior, K)
    mean = prior.mean_level + delta
    best, best_gap = None, None
    for attempt in range(1, max_tries + 1):
        gamma, support = _draw(sampler, rng, mean)
        gap = abs(int(support.sum()) - K)
        if best_gap is None or gap < best_gap:
            best, best_gap = (gamma, support), gap
        if gap == 0:
            break
    gamma, support = best
    exact = best_gap == 0
    if not exact:
        warnings.warn(f"no draw with exactly K={K} nonzeros in {max_tries} tries; closest is off by {best_gap}")
    return PriorSample(
        gamma, support, _coefficients(rng, support, slab), seed=seed, mean_shift=delta, tries=attempt, exact=exact
    )
