"""Observation models: Gaussian (exact f1 naturals) and probit (EP sites on projections)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import log_ndtr

from .errors import InputError
from .moments import MIN_CAVITY_PRECISION, site_update_from_moments

GAUSSIAN = "gaussian"
PROBIT = "probit"
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Problem:
    """Forward model ``A`` (N x D), observations ``Y`` (N x T) and the likelihood.

    For the Gaussian model ``noise_variance`` is either a scalar shared by all
    columns or a length-T vector (per-column override).
    """

    A: np.ndarray
    Y: np.ndarray
    likelihood: str = GAUSSIAN
    noise_variance: Optional[float | np.ndarray] = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if A.ndim != 2 or Y.ndim != 2 or A.shape[0] != Y.shape[0]:
            raise InputError(f"A {A.shape} and Y {Y.shape} are not conformable")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(Y))):
            raise InputError("A and Y must be finite")
        if self.likelihood == GAUSSIAN:
            s2 = np.broadcast_to(np.asarray(self.noise_variance, dtype=float), (Y.shape[1],)).copy()
            if self.noise_variance is None or not np.all(s2 > 0):
                raise InputError("Gaussian likelihood needs a positive noise variance")
            object.__setattr__(self, "noise_variance", s2)
        elif self.likelihood == PROBIT:
            if not np.all(np.isin(Y, (-1.0, 1.0))):
                raise InputError("probit labels must be -1 or +1")
        else:
            raise InputError(f"unknown likelihood {self.likelihood!r}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Y", Y)

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def D(self) -> int:
        return self.A.shape[1]

    @property
    def T(self) -> int:
        return self.Y.shape[1]


class F1Naturals(NamedTuple):
    """Likelihood term for one column in the form exp(-x'A'diag(theta)Ax/2 + x'A'h).

    The D x D precision ``A' diag(theta) A`` is never formed; ``log_const``
    is the x-independent log factor (zero for EP sites).
    """

    A: np.ndarray
    theta: np.ndarray
    h: np.ndarray
    log_const: float = 0.0

    def precision(self) -> np.ndarray:
        return self.A.T @ (self.theta[:, None] * self.A)

    def precision_times_mean(self) -> np.ndarray:
        return self.A.T @ self.h


def gaussian_f1_naturals(A, y_t, noise_variance: float) -> F1Naturals:
    """Exact naturals of N(y | A x, s2 I): precision A'A / s2, information A'y / s2."""
    if not noise_variance > 0:
        raise InputError("noise variance must be positive")
    y = np.asarray(y_t, dtype=float)
    n = y.shape[0]
    theta = np.full(n, 1.0 / noise_variance)
    const = -0.5 * n * (_LOG_2PI + np.log(noise_variance)) - 0.5 * float(y @ y) / noise_variance
    return F1Naturals(np.asarray(A, dtype=float), theta, y / noise_variance, const)


class ProbitMoments(NamedTuple):
    log_z: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def probit_tilted_moments(cav_mean, cav_var, label) -> ProbitMoments:
    """Moments of Phi(label * u) N(u | cav_mean, cav_var)."""
    m = np.asarray(cav_mean, dtype=float)
    v = np.asarray(cav_var, dtype=float)
    y = np.asarray(label, dtype=float)
    s = np.sqrt(1.0 + v)
    z = y * m / s
    log_z = log_ndtr(z)
    r = np.exp(-0.5 * (_LOG_2PI + z**2) - log_z)  # N(z) / Phi(z)
    mean = m + y * v * r / s
    var = v - v**2 * r * (z + r) / (1.0 + v)
    return ProbitMoments(log_z, mean, var)


class ProbitSweep(NamedTuple):
    precision: np.ndarray
    precision_times_mean: np.ndarray
    updated: np.ndarray


def probit_sweep(
    site_prec,
    site_ptm,
    proj_mean,
    proj_var,
    labels,
    damping: float,
    var_inf: Optional[float] = None,
) -> ProbitSweep:
    """Refresh all probit sites given the current marginals of the projections A x_t.

    Arrays are N x T. Sites with an invalid cavity are left unchanged.
    """
    glob_prec = 1.0 / np.asarray(proj_var, dtype=float)
    cav_prec = glob_prec - site_prec
    valid = cav_prec > MIN_CAVITY_PRECISION
    cp = np.where(valid, cav_prec, 1.0)
    cav_var = 1.0 / cp
    cav_mean = (proj_mean * glob_prec - site_ptm) * cav_var
    mom = probit_tilted_moments(cav_mean, cav_var, labels)
    new_prec, new_ptm = site_update_from_moments(
        mom.mean, mom.var, cav_mean, cav_var, site_prec, site_ptm, damping, var_inf
    )
    # the probit factor is log-concave, so negative precision is only round-off
    new_prec = np.maximum(new_prec, 0.0)
    return ProbitSweep(
        np.where(valid, new_prec, site_prec), np.where(valid, new_ptm, site_ptm), valid
    )


def probit_f1_naturals(A, site_prec_t, site_ptm_t) -> F1Naturals:
    return F1Naturals(np.asarray(A, dtype=float), np.asarray(site_prec_t, dtype=float), np.asarray(site_ptm_t, dtype=float))
