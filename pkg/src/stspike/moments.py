"""Cavities, tilted moments and site refreshes for the EP site families.

All routines are vectorized over numpy arrays and work in the log domain.
Bernoulli sites are handled as log-odds.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np
from scipy.special import expit, log_ndtr, logit

from .errors import NumericalError
from .prior import SlabParams

EPS_PROB = 1e-12
LOGODDS_CLAMP = 35.0
MIN_CAVITY_PRECISION = 1e-12
_LOG_2PI = np.log(2.0 * np.pi)


def _log_norm_pdf_at_zero(mean, var):
    return -0.5 * (_LOG_2PI + np.log(var)) - 0.5 * mean**2 / var


def _log_std_pdf(c):
    return -0.5 * (_LOG_2PI + c**2)


def _log_probs(cav_prob, cav_log_odds):
    """(log p, log(1 - p)) from either a probability or log-odds."""
    if cav_log_odds is not None:
        lo = np.clip(np.asarray(cav_log_odds, dtype=float), -LOGODDS_CLAMP, LOGODDS_CLAMP)
        return -np.logaddexp(0.0, -lo), -np.logaddexp(0.0, lo), lo
    p = np.clip(np.asarray(cav_prob, dtype=float), EPS_PROB, 1.0 - EPS_PROB)
    return np.log(p), np.log1p(-p), logit(p)


class Cavity(NamedTuple):
    mean: np.ndarray
    var: np.ndarray
    valid: np.ndarray


def cavity_gaussian(global_prec, global_ptm, site_prec, site_ptm) -> Cavity:
    """Remove a Gaussian site from a marginal by subtracting natural parameters.

    Entries whose cavity precision is not above ``MIN_CAVITY_PRECISION`` are
    flagged invalid (mean and variance NaN) and must be skipped this sweep.
    """
    prec = np.asarray(global_prec, dtype=float) - site_prec
    ptm = np.asarray(global_ptm, dtype=float) - site_ptm
    valid = prec > MIN_CAVITY_PRECISION
    safe = np.where(valid, prec, 1.0)
    return Cavity(np.where(valid, ptm / safe, np.nan), np.where(valid, 1.0 / safe, np.nan), valid)


class TiltedMoments(NamedTuple):
    mean: np.ndarray
    var: np.ndarray
    prob: np.ndarray
    log_z: np.ndarray
    site_log_odds: np.ndarray


def moments_f2(cav_mean, cav_var, cav_prob=None, slab: SlabParams = SlabParams(), cav_log_odds=None) -> TiltedMoments:
    """Moments of the spike-and-slab factor times a Gaussian x Bernoulli cavity.

    With spike weight N(0 | m, v) and slab weight N(0 | m - rho0, v + tau0),
    the tilted distribution is a two-component mixture. ``site_log_odds`` is
    logit(E[z]) - logit(p), the refreshed Bernoulli site, which does not
    depend on p.
    """
    m = np.asarray(cav_mean, dtype=float)
    v = np.asarray(cav_var, dtype=float)
    rho, tau = slab.slab_mean, slab.slab_variance
    logp, log1mp, _ = _log_probs(cav_prob, cav_log_odds)
    log_spike = _log_norm_pdf_at_zero(m, v)
    log_slab = _log_norm_pdf_at_zero(m - rho, v + tau)
    log_z = np.logaddexp(log1mp + log_spike, logp + log_slab)
    prob = np.exp(logp + log_slab - log_z)
    slab_var = tau * v / (tau + v)
    slab_mean = (m * tau + rho * v) / (tau + v)
    mean = prob * slab_mean
    var = prob * slab_var + prob * (1.0 - prob) * slab_mean**2
    site_lo = np.clip(log_slab - log_spike, -LOGODDS_CLAMP, LOGODDS_CLAMP)
    out = TiltedMoments(mean, var, prob, log_z, site_lo)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var)) and np.all(np.isfinite(log_z))):
        raise NumericalError(f"non-finite f2 moments for cavity mean={m}, var={v}")
    return out


def moments_f3(cav_mean, cav_var, cav_prob=None, cav_log_odds=None, strict: bool = True) -> TiltedMoments:
    """Moments of Ber(z | Phi(gamma)) times a Gaussian x Bernoulli cavity.

    The normalizer is G0 = (1 - p)(1 - Phi(c)) + p Phi(c) with
    c = mu / sqrt(1 + Sigma). Mean and variance follow from derivatives of
    log G0 with respect to the cavity mean, which equals the closed-form
    G1 / G0 and G2 / G0 - (G1 / G0)^2 but avoids subtracting large squares.
    """
    mu = np.asarray(cav_mean, dtype=float)
    s2 = np.asarray(cav_var, dtype=float)
    logp, log1mp, lo = _log_probs(cav_prob, cav_log_odds)
    a = np.tanh(0.5 * lo)  # 2p - 1
    s = np.sqrt(1.0 + s2)
    c = mu / s
    log_phi_c, log_phi_mc = log_ndtr(c), log_ndtr(-c)
    log_g0 = np.logaddexp(log1mp + log_phi_mc, logp + log_phi_c)
    prob = np.exp(logp + log_phi_c - log_g0)
    r = np.exp(_log_std_pdf(c) - log_g0)
    alpha = a * r / s
    mean = mu + s2 * alpha
    var = s2 - s2**2 * (alpha**2 + a * c * r / (1.0 + s2))
    site_lo = np.clip(log_phi_c - log_phi_mc, -LOGODDS_CLAMP, LOGODDS_CLAMP)
    if strict and (np.any(var <= 0) or not np.all(np.isfinite(mean))):
        raise NumericalError(f"degenerate f3 moments for cavity mean={mu}, var={s2}, p={np.exp(logp)}")
    return TiltedMoments(mean, var, prob, log_g0, site_lo)


def moments_f3_closed_form(cav_mean, cav_var, cav_prob):
    """Direct G0, G1, G2, Z1 evaluation; kept as a cross-check of ``moments_f3``."""
    mu, s2 = float(cav_mean), float(cav_var)
    p = min(max(float(cav_prob), EPS_PROB), 1.0 - EPS_PROB)
    from scipy.special import ndtr

    c = mu / np.sqrt(1.0 + s2)
    phi_c = ndtr(c)
    pdf_c = np.exp(_log_std_pdf(c))
    d = s2 * pdf_c / (phi_c * np.sqrt(1.0 + s2))
    b = s2**2 * c * pdf_c / (phi_c * (1.0 + s2))
    w = 2.0 * mu * (mu + d) + (s2 - mu**2) - b
    g0 = (1.0 - p) * (1.0 - phi_c) + p * phi_c
    z1 = p * phi_c
    g1 = g0 * mu + (2.0 * z1 - phi_c) * d
    g2 = (1.0 - p) * (mu**2 + s2 - phi_c * w) + z1 * w
    return g0, g1, g2, z1


def site_update_from_moments(
    post_mean,
    post_var,
    cav_mean,
    cav_var,
    old_prec,
    old_ptm,
    damping: float,
    var_inf: Optional[float] = None,
):
    """Damped Gaussian site refresh: (1 - a) old + a (posterior - cavity) naturals.

    If the damped precision comes out negative the site variance is set to
    ``var_inf`` and its mean chosen so that the refreshed marginal keeps the
    matched first moment. Without ``var_inf`` negative precisions pass
    through. Returns ``(precision, precision_times_mean)``.
    """
    post_mean = np.asarray(post_mean, dtype=float)
    post_var = np.asarray(post_var, dtype=float)
    good = np.isfinite(post_var) & (post_var > 0)
    pv = np.where(good, post_var, 1.0)
    new_prec = np.where(good, 1.0 / pv - 1.0 / cav_var, -1.0)
    new_ptm = np.where(good, post_mean / pv - cav_mean / cav_var, 0.0)
    prec = (1.0 - damping) * old_prec + damping * new_prec
    ptm = (1.0 - damping) * old_ptm + damping * new_ptm
    if var_inf is not None:
        bad = prec < 0
        if np.any(bad):
            clamp_prec = 1.0 / var_inf
            clamp_ptm = np.where(good, post_mean, cav_mean) * (1.0 / cav_var + clamp_prec) - cav_mean / cav_var
            prec = np.where(bad, clamp_prec, prec)
            ptm = np.where(bad, clamp_ptm, ptm)
    return prec, ptm


def bernoulli_site_update(expected_z, cav_prob):
    """Site log-odds from the quotient Ber(E[z]) / Ber(cavity p)."""
    ez = np.clip(np.asarray(expected_z, dtype=float), EPS_PROB, 1.0 - EPS_PROB)
    cp = np.clip(np.asarray(cav_prob, dtype=float), EPS_PROB, 1.0 - EPS_PROB)
    return np.clip(logit(ez) - logit(cp), -LOGODDS_CLAMP, LOGODDS_CLAMP)


def combine_log_odds(log_odds_a, log_odds_b):
    """Global P(z = 1) from two Bernoulli sites given in log-odds."""
    return expit(np.asarray(log_odds_a) + np.asarray(log_odds_b))


def combine_probs(p, q):
    """p q / (p q + (1 - p)(1 - q)); the same product written in probabilities."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    return p * q / (p * q + (1.0 - p) * (1.0 - q))


def damp_log_odds(old, new, damping: float):
    return np.clip((1.0 - damping) * old + damping * new, -LOGODDS_CLAMP, LOGODDS_CLAMP)


def log_gaussian_site_mass(site_prec, site_ptm, cav_mean, cav_var):
    """log of the integral of exp(-prec x^2 / 2 + ptm x) against N(x | cav_mean, cav_var)."""
    post_prec = 1.0 / cav_var + site_prec
    post_ptm = cav_mean / cav_var + site_ptm
    return -0.5 * np.log(cav_var * post_prec) + 0.5 * (post_ptm**2 / post_prec - cav_mean**2 / cav_var)


def log_bernoulli_site_mass(site_log_odds, cav_log_odds):
    """log sum_z exp(site_log_odds * z) Ber(z | expit(cav_log_odds))."""
    logp = -np.logaddexp(0.0, -cav_log_odds)
    log1mp = -np.logaddexp(0.0, cav_log_odds)
    return np.logaddexp(log1mp, logp + site_log_odds)
