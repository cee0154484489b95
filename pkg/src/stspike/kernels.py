"""Covariance kernels and Kronecker / low-rank linear algebra.

Flattening convention used throughout the package: a D x T array ``G`` with
spatial index ``i`` and time index ``t`` maps to the flat vector ``v`` with
``v[t * D + i] = G[i, t]``, i.e. time varies slowest. Under this ordering the
covariance ``temporal (x) spatial`` acts on ``G.T.ravel()``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg

from .errors import InputError, NumericalError

JITTER_SCALE = 1e-8


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CoordinateGrid:
    """Spatial coordinates of the D features, one row per feature."""

    points: np.ndarray
    spacing: Optional[float] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise InputError("coordinates must be a (D, dim) array")
        if not np.all(np.isfinite(pts)):
            raise InputError("coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))

    @classmethod
    def regular(cls, n: int, spacing: float = 1.0, start: float = 0.0) -> "CoordinateGrid":
        return cls(start + spacing * np.arange(n, dtype=float), spacing=spacing)

    def __len__(self) -> int:
        return self.points.shape[0]


def _as_points(coords) -> np.ndarray:
    if isinstance(coords, CoordinateGrid):
        return coords.points
    return CoordinateGrid(coords).points


def squared_distances(coords) -> np.ndarray:
    pts = _as_points(coords)
    sq = np.sum(pts**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pts @ pts.T
    # exact zeros on the diagonal, no negative round-off
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def squared_exponential(coords, lengthscale: float, magnitude: float) -> np.ndarray:
    """``magnitude * exp(-|d_i - d_j|^2 / (2 lengthscale^2))`` on the given points.

    No jitter is added here; factorizations add ``JITTER_SCALE * magnitude``.
    """
    if not lengthscale > 0 or not magnitude > 0:
        raise InputError("lengthscale and magnitude must be positive")
    d2 = squared_distances(coords)
    return magnitude * np.exp(-0.5 * d2 / lengthscale**2)


def ar1_temporal_kernel(alpha: float, T: int, times=None) -> np.ndarray:
    """Stationary covariance ``alpha**|t - t'|`` of a unit-variance AR(1) process.

    This is the covariance of ``g_t = alpha g_{t-1} + sqrt(1 - alpha^2) e_t``,
    so every marginal keeps unit scale. ``alpha = 1`` (joint sparsity) is
    rejected; use a temporal group spanning all of T instead.
    """
    if not 0.0 <= alpha < 1.0:
        raise InputError("alpha must lie in [0, 1); use temporal grouping for alpha = 1")
    t = np.arange(T, dtype=float) if times is None else np.asarray(times, dtype=float)
    lag = np.abs(t[:, None] - t[None, :])
    with np.errstate(divide="ignore"):
        out = np.power(alpha, lag)
    out[lag == 0] = 1.0
    return out


def check_covariance(m: np.ndarray, name: str = "covariance") -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError(f"{name} has non-finite entries")
    scale = max(np.max(np.abs(m)), 1e-300)
    if np.max(np.abs(m - m.T)) > 1e-12 * scale:
        raise InputError(f"{name} is not symmetric")
    return m


def jittered_cholesky(m: np.ndarray, scale: Optional[float] = None, retries: int = 1) -> np.ndarray:
    """Lower Cholesky factor of ``m + jitter I``; one retry with 100x jitter."""
    n = m.shape[0]
    if scale is None:
        scale = float(np.max(np.diag(m))) if n else 1.0
    jitter = JITTER_SCALE * max(scale, 1e-300)
    for attempt in range(retries + 1):
        try:
            return linalg.cholesky(m + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            jitter *= 100.0
    raise NumericalError(
        f"Cholesky failed after jitter {jitter / 100.0:.3g}; "
        f"diagonal range [{np.min(np.diag(m)):.3g}, {np.max(np.diag(m)):.3g}]"
    )


class EigenDecomposition(NamedTuple):
    basis: np.ndarray
    eigenvalues: np.ndarray


def eigendecompose(m: np.ndarray) -> EigenDecomposition:
    """Symmetric eigendecomposition with nonincreasing, nonnegative eigenvalues."""
    m = check_covariance(m)
    try:
        s, u = linalg.eigh(m)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed (cond estimate {np.linalg.cond(m):.3g})") from exc
    order = np.argsort(-s, kind="stable")
    s, u = s[order], u[:, order]
    top = max(s[0], 0.0) if s.size else 0.0
    if s.size and s[-1] < -1e-10 * max(top, 1.0):
        raise NumericalError(f"matrix is not PSD: smallest eigenvalue {s[-1]:.3g}")
    return EigenDecomposition(u, np.clip(s, 0.0, None))


@dataclass(frozen=True)
class KroneckerCovariance:
    """``temporal (x) spatial`` kept in factored form."""

    temporal: np.ndarray
    spatial: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "temporal", _frozen(check_covariance(self.temporal, "temporal factor")))
        object.__setattr__(self, "spatial", _frozen(check_covariance(self.spatial, "spatial factor")))

    @property
    def T(self) -> int:
        return self.temporal.shape[0]

    @property
    def D(self) -> int:
        return self.spatial.shape[0]

    @property
    def size(self) -> int:
        return self.T * self.D

    def diag(self) -> np.ndarray:
        return np.kron(np.diag(self.temporal), np.diag(self.spatial))

    def dense(self) -> np.ndarray:
        return np.kron(self.temporal, self.spatial)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return kron_matvec(self.temporal, self.spatial, v)


def kron_matvec(temporal_factor: np.ndarray, spatial_factor: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``(temporal (x) spatial) @ v`` via ``vec(S V T^T)`` without forming the product.

    ``v`` may also be a (T*D, k) matrix; each column is transformed.
    """
    T, D = temporal_factor.shape[0], spatial_factor.shape[0]
    v = np.asarray(v, dtype=float)
    if temporal_factor.shape != (T, T) or spatial_factor.shape != (D, D):
        raise InputError("Kronecker factors must be square")
    if v.shape[0] != T * D:
        raise InputError(f"vector length {v.shape[0]} does not match T*D = {T * D}")
    if v.ndim == 1:
        V = v.reshape(T, D)
        return (temporal_factor @ V @ spatial_factor.T).ravel()
    k = v.shape[1]
    V = v.reshape(T, D, k)
    out = np.einsum("ab,bjk->ajk", temporal_factor, V)
    out = np.einsum("ij,ajk->aik", spatial_factor, out)
    return out.reshape(T * D, k)


def kron_eigendecompose(cov: KroneckerCovariance) -> tuple[EigenDecomposition, EigenDecomposition]:
    """Factor eigendecompositions; the product spectrum is ``outer(S_t, S_s)``."""
    return eigendecompose(cov.temporal), eigendecompose(cov.spatial)


@dataclass(frozen=True)
class LowRankPlusDiagonal:
    """``U diag(S) U^T + diag(diagonal)`` with the exact prior diagonal preserved."""

    basis: np.ndarray
    eigenvalues: np.ndarray
    diagonal: np.ndarray
    preservation_residual: float = 0.0
    clamped: int = field(default=0)

    @property
    def rank(self) -> int:
        return self.eigenvalues.shape[0]

    def diag(self) -> np.ndarray:
        return np.einsum("ik,k,ik->i", self.basis, self.eigenvalues, self.basis) + self.diagonal

    def dense(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T + np.diag(self.diagonal)


def low_rank_approximate(
    cov: KroneckerCovariance | np.ndarray,
    rank: Optional[int] = None,
    fraction: Optional[float] = None,
) -> LowRankPlusDiagonal:
    """Keep the leading eigenpairs of the prior, pad the diagonal back to exact.

    Give either ``rank`` (number of eigenpairs, 0 allowed) or ``fraction`` (the
    smallest count whose cumulative eigenvalue share reaches it). Equal
    eigenvalues are ordered by flat index so the result is deterministic.
    """
    if (rank is None) == (fraction is None):
        raise InputError("give exactly one of rank or fraction")
    if isinstance(cov, KroneckerCovariance):
        et, es = kron_eigendecompose(cov)
        values = np.outer(et.eigenvalues, es.eigenvalues).ravel()
        exact_diag = cov.diag()
        n = cov.size
    else:
        cov = check_covariance(cov)
        e = eigendecompose(cov)
        values = e.eigenvalues
        exact_diag = np.diag(cov).copy()
        n = cov.shape[0]

    flat = np.arange(values.size)
    order = np.lexsort((flat, -values))
    if rank is not None:
        if not 0 <= rank <= n:
            raise InputError(f"rank must lie in [0, {n}]")
        k = int(rank)
    else:
        if not 0.0 < fraction <= 1.0:
            raise InputError("fraction must lie in (0, 1]")
        total = values.sum()
        share = np.cumsum(values[order]) / total
        k = int(np.searchsorted(share, fraction - 1e-12) + 1)
        k = min(k, n)

    keep = order[:k]
    if isinstance(cov, KroneckerCovariance):
        a, b = np.divmod(keep, cov.D)
        basis = et.basis[:, a][:, None, :] * es.basis[:, b][None, :, :]
        basis = basis.reshape(n, k)
    else:
        basis = e.basis[:, keep]
    s = values[keep]
    captured = np.einsum("ik,k,ik->i", basis, s, basis)
    lam = exact_diag - captured
    clamped = int(np.sum(lam < 0))
    # full rank leaves only round-off here
    lam[np.abs(lam) <= 1e-12 * max(np.max(exact_diag), 1e-300)] = 0.0
    lam = np.clip(lam, 0.0, None)
    residual = float(np.max(np.abs(captured + lam - exact_diag))) if n else 0.0
    return LowRankPlusDiagonal(_frozen(basis), _frozen(s), _frozen(lam), residual, clamped)
