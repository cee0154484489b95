"""Independent reference computations used by the tests.

Nothing here calls into the closed-form moment code or the EP engine: tilted
moments come from adaptive 1-D quadrature plus an explicit sum over the
binary variable, posteriors from dense inverses or exhaustive enumeration.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import integrate, stats

QUAD = dict(epsabs=0.0, epsrel=1e-13, limit=400)


# scalar math-module integrands: quad evaluates them point by point
def _norm_pdf(x, m, v):
    return math.exp(-0.5 * (x - m) ** 2 / v) / math.sqrt(2.0 * math.pi * v)


def _phi_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _moments_1d(weight, lo, hi, centre):
    """Mass, mean and central variance of a nonnegative 1-D weight on [lo, hi]."""
    pts = [centre] if lo < centre < hi else None
    z = integrate.quad(weight, lo, hi, points=pts, **QUAD)[0]
    m = integrate.quad(lambda x: x * weight(x), lo, hi, points=pts, **QUAD)[0] / z
    v = integrate.quad(lambda x: (x - m) ** 2 * weight(x), lo, hi, points=pts, **QUAD)[0] / z
    return z, m, v


def quad_f2(m, v, p, rho, tau):
    """Tilted moments of ((1 - z) delta(x) + z N(x | rho, tau)) Bern(z | p) N(x | m, v).

    Returns (Z, E[x], Var[x], E[z]). The point mass is handled analytically;
    the slab part is integrated numerically over a window that covers both
    Gaussians.
    """
    sd = math.sqrt(max(v, tau))
    lo, hi = min(m, rho) - 14.0 * sd, max(m, rho) + 14.0 * sd
    centre = (m * tau + rho * v) / (tau + v)
    slab = lambda x: _norm_pdf(x, rho, tau) * _norm_pdf(x, m, v)  # noqa: E731
    z1, m1, v1 = _moments_1d(slab, lo, hi, centre)
    z0 = _norm_pdf(0.0, m, v)
    Z = (1 - p) * z0 + p * z1
    w1 = p * z1 / Z
    mean = w1 * m1
    second = w1 * (v1 + m1**2)
    return Z, mean, second - mean**2, w1


def quad_f3(mu, s2, p):
    """Tilted moments of Bern(z | Phi(g)) Bern(z | p) N(g | mu, s2).

    Returns (Z, E[g], Var[g], E[z]); the z-sum is taken inside the integrand.
    """
    sd = math.sqrt(s2)
    lo, hi = mu - 14.0 * sd, mu + 14.0 * sd
    w = lambda g: (p * _phi_cdf(g) + (1 - p) * _phi_cdf(-g)) * _norm_pdf(g, mu, s2)  # noqa: E731
    Z, mean, var = _moments_1d(w, lo, hi, mu)
    z1 = integrate.quad(lambda g: p * _phi_cdf(g) * _norm_pdf(g, mu, s2), lo, hi, points=[mu], **QUAD)[0]
    return Z, mean, var, z1 / Z


def quad_probit(m, v, label):
    """(Z, E[f], Var[f]) of Phi(label f) N(f | m, v)."""
    sd = math.sqrt(v)
    z, mean, var = _moments_1d(lambda f: _phi_cdf(label * f) * _norm_pdf(f, m, v), m - 14 * sd, m + 14 * sd, m)
    return z, mean, var


def enumerate_posterior(A, y, noise_variance, prior_prob, slab_mean=0.0, slab_var=1.0):
    """Exact log evidence and support marginals of the independent spike-and-slab model."""
    N, D = A.shape
    p = np.broadcast_to(np.asarray(prior_prob, dtype=float), (D,))
    supports = np.array(list(itertools.product((0, 1), repeat=D)), dtype=float)
    logw = np.empty(len(supports))
    for k, z in enumerate(supports):
        cov = slab_var * (A * z) @ A.T + noise_variance * np.eye(N)
        mean = A @ (slab_mean * z)
        logw[k] = stats.multivariate_normal.logpdf(y, mean, cov) + np.sum(z * np.log(p) + (1 - z) * np.log1p(-p))
    top = logw.max()
    w = np.exp(logw - top)
    return top + np.log(w.sum()), (w @ supports) / w.sum()


def dense_probit_ep(A, labels, slab_mean, slab_var, damping=0.5, iters=5000, tol=1e-13):
    """Parallel probit EP in the space of the projections f = A x.

    Gaussian prior x ~ N(slab_mean, slab_var I), hence f ~ N(m0, K) with
    K = slab_var A A'. Marginals are computed from dense inverses of the
    N x N system; returns the posterior mean of x.
    """
    N, D = A.shape
    K = slab_var * A @ A.T
    m0 = A @ np.full(D, slab_mean)
    tau = np.zeros(N)
    nu = np.zeros(N)
    for _ in range(iters):
        Sig = np.linalg.inv(np.eye(N) + K * tau[None, :]) @ K
        mu = np.linalg.solve(np.eye(N) + K * tau[None, :], m0) + Sig @ nu
        s = np.diag(Sig)
        cav_v = 1.0 / (1.0 / s - tau)
        cav_m = cav_v * (mu / s - nu)
        z = labels * cav_m / np.sqrt(1 + cav_v)
        r = np.exp(stats.norm.logpdf(z) - stats.norm.logcdf(z))
        hat_m = cav_m + labels * cav_v * r / np.sqrt(1 + cav_v)
        hat_v = cav_v - cav_v**2 * r * (z + r) / (1 + cav_v)
        new_tau = 1.0 / hat_v - 1.0 / cav_v
        new_nu = hat_m / hat_v - cav_m / cav_v
        tau_n = (1 - damping) * tau + damping * new_tau
        nu_n = (1 - damping) * nu + damping * new_nu
        done = max(np.max(np.abs(tau_n - tau)), np.max(np.abs(nu_n - nu))) < tol
        tau, nu = tau_n, nu_n
        if done:
            break
    P = np.eye(D) / slab_var + A.T @ (tau[:, None] * A)
    return np.linalg.solve(P, np.full(D, slab_mean / slab_var) + A.T @ nu)
