"""Reconstruction metrics and the two reference solvers (OMP, oracle ridge)."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import linalg

from .errors import InputError


class Metrics(NamedTuple):
    nmse: float
    f_measure: float
    precision: float
    recall: float


def nmse(estimate, truth) -> float:
    """Squared Frobenius error relative to the energy of ``truth``."""
    est = np.asarray(estimate, dtype=float)
    ref = np.asarray(truth, dtype=float)
    if est.shape != ref.shape:
        raise InputError(f"shape mismatch {est.shape} vs {ref.shape}")
    energy = float(np.sum(ref**2))
    if energy == 0.0:
        raise InputError("NMSE is undefined for an all-zero truth")
    return float(np.sum((est - ref) ** 2) / energy)


def support_scores(predicted, truth) -> tuple[float, float, float]:
    """(F, precision, recall) from two boolean supports.

    Both empty counts as perfect agreement; one empty and the other not as 0.
    """
    pred = np.asarray(predicted, dtype=bool)
    ref = np.asarray(truth, dtype=bool)
    tp = int(np.sum(pred & ref))
    n_pred, n_ref = int(pred.sum()), int(ref.sum())
    if n_pred == 0 and n_ref == 0:
        return 1.0, 1.0, 1.0
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_ref if n_ref else 0.0
    f = 2.0 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return f, prec, rec


def f_measure(support_probs, truth_support, threshold: float = 0.5) -> Metrics:
    """Support metrics of ``support_probs > threshold``; ``nmse`` is left NaN."""
    p = np.asarray(support_probs, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise InputError("support probabilities must lie in [0, 1]")
    f, prec, rec = support_scores(p > threshold, np.asarray(truth_support) != 0)
    return Metrics(float("nan"), f, prec, rec)


def evaluate(estimate, support_probs, truth, threshold: float = 0.5) -> Metrics:
    m = f_measure(support_probs, np.asarray(truth) != 0, threshold)
    return m._replace(nmse=nmse(estimate, truth))


def omp(A, y, K: int) -> np.ndarray:
    """Orthogonal matching pursuit with K greedy steps.

    Picks the column with the largest absolute correlation with the residual
    (lowest index on ties), then refits all selected columns by least squares.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    N, D = A.shape
    if not 0 <= K <= min(N, D):
        raise InputError(f"K must lie in [0, {min(N, D)}]")
    if np.any(np.linalg.norm(A, axis=0) == 0):
        raise InputError("A has an all-zero column")
    x = np.zeros(D)
    chosen: list[int] = []
    resid = y.copy()
    for _ in range(K):
        corr = np.abs(A.T @ resid)
        corr[chosen] = -np.inf
        j = int(np.argmax(corr))  # first maximum on ties
        chosen.append(j)
        coef, *_ = linalg.lstsq(A[:, chosen], y)
        resid = y - A[:, chosen] @ coef
    if chosen:
        x[chosen] = coef
    return x


def oracle_ridge(A, y, support, lam: float = 1e-3) -> np.ndarray:
    """Ridge solution restricted to the known support, zero elsewhere."""
    A = np.asarray(A, dtype=float)
    idx = np.flatnonzero(np.asarray(support))
    x = np.zeros(A.shape[1])
    if idx.size == 0:
        return x
    As = A[:, idx]
    x[idx] = linalg.solve(As.T @ As + lam * np.eye(idx.size), As.T @ np.asarray(y, dtype=float), assume_a="pos")
    return x
