"""Synthetic problems, solver wrappers and the benchmark sweeps.

Every random quantity is drawn from a generator seeded by a
``numpy.random.SeedSequence`` derived from the master seed and the position
in the sweep, so a sweep is reproducible regardless of worker count.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .engine import EPConfig, run_ep
from .errors import InputError, StSpikeError
from .io import read_matrix
from .likelihoods import GAUSSIAN, Problem
from .metrics import evaluate, nmse, omp, oracle_ridge, support_scores
from .prior import (
    GammaPriorSpec,
    KernelFactor,
    SlabParams,
    _mean_shift_for,
    sample_prior_conditioned,
)

ROW_COLUMNS = [
    "ratio", "N", "trial", "method", "nmse", "f_measure", "precision", "recall",
    "iterations", "converged", "log_evidence", "seed", "error",
]


# -- data generation

def gaussian_ensemble(N: int, D: int, rng: np.random.Generator, normalize: bool = True) -> np.ndarray:
    """i.i.d. N(0, 1) matrix, optionally with unit-norm columns."""
    A = rng.standard_normal((N, D))
    if normalize:
        A /= np.linalg.norm(A, axis=0)
    return A


def add_noise(signal: np.ndarray, snr_db: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Add white noise scaled so that 10 log10(|signal|^2 / |noise|^2) is exactly ``snr_db``.

    Returns the noisy observations and the nominal noise variance
    ``|noise|^2 / size`` that was used.
    """
    energy = float(np.sum(signal**2))
    if energy == 0.0:
        raise InputError("cannot set an SNR for a zero signal")
    e = rng.standard_normal(signal.shape)
    target = energy / 10.0 ** (snr_db / 10.0)
    e *= math.sqrt(target / float(np.sum(e**2)))
    return signal + e, target / signal.size


def empirical_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    return 10.0 * math.log10(float(np.sum(clean**2)) / float(np.sum((noisy - clean) ** 2)))


def cosine_cluster_signal(D: int = 200, clusters=((0.25, 0.12, 1.0), (0.65, 0.18, -1.0))) -> np.ndarray:
    """Sparse test vector with blocks of active entries shaped by a cosine.

    Each cluster is (center fraction, width fraction, sign); inside it the
    value is sign * (0.5 + cos(pi * offset / width)), so active magnitudes
    lie in [0.5, 1.5].
    """
    x = np.zeros(D)
    i = np.arange(D)
    for center, width, sign in clusters:
        c, w = center * D, width * D
        inside = np.abs(i - c) <= w / 2
        x[inside] = sign * (0.5 + np.cos(np.pi * (i[inside] - c) / w))
    return x


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def child_seed(master: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))


# -- configuration helpers

def kernel_factor_from_config(cfg: dict, base_dir: Optional[str] = None) -> KernelFactor:
    kind = cfg.get("kernel", "se")
    n = int(cfg["size"])
    if kind == "se":
        if cfg.get("coords"):
            coords = read_matrix(_resolve(cfg["coords"], base_dir))
            if coords.shape[0] != n:
                raise InputError(f"coordinate file has {coords.shape[0]} rows, expected {n}")
        else:
            coords = float(cfg.get("spacing", 1.0)) * np.arange(n, dtype=float)
        return KernelFactor.se(coords, float(cfg["lengthscale"]), float(cfg.get("magnitude", 1.0)))
    if kind == "ar1":
        return KernelFactor.ar1(float(cfg["alpha"]), n)
    if kind == "diag":
        return KernelFactor.diagonal(n, float(cfg.get("magnitude", 1.0)))
    if kind == "identity":
        return KernelFactor.identity(n)
    if kind == "matrix":
        return KernelFactor.fixed(read_matrix(_resolve(cfg["path"], base_dir)))
    raise InputError(f"unknown kernel {kind!r}")


def _resolve(path: str, base_dir: Optional[str]) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base_dir is None else Path(base_dir) / p


def prior_from_config(cfg: dict, base_dir: Optional[str] = None) -> GammaPriorSpec:
    spatial = kernel_factor_from_config(cfg["spatial"], base_dir)
    temporal_cfg = cfg.get("temporal", {"kernel": "identity", "size": 1})
    temporal = kernel_factor_from_config(temporal_cfg, base_dir)
    return GammaPriorSpec(float(cfg.get("mean_level", 0.0)), spatial, temporal)


def slab_from_config(cfg: Optional[dict]) -> SlabParams:
    cfg = cfg or {}
    return SlabParams(float(cfg.get("mean", 0.0)), float(cfg.get("variance", 1.0)))


def ep_config_from(cfg: Optional[dict], scheme: Optional[str] = None) -> EPConfig:
    cfg = dict(cfg or {})
    if scheme is not None:
        cfg["scheme"] = scheme
    return EPConfig(**cfg)


def diagonal_variant(prior: GammaPriorSpec) -> GammaPriorSpec:
    """Independent prior with the same mean and marginal variances."""
    d = prior.diag()
    if not np.allclose(d, d[0]):
        raise InputError("diagonal variant needs a constant prior variance")
    return GammaPriorSpec.independent(prior.D, prior.T, prior.mean_level, float(d[0]))


def spatial_only_variant(prior: GammaPriorSpec) -> GammaPriorSpec:
    """Spatial correlation kept, time points made independent."""
    kt = prior.temporal.matrix()
    return GammaPriorSpec(prior.mean_level, prior.spatial, KernelFactor.diagonal(prior.T, float(kt[0, 0])))


def variant(prior: GammaPriorSpec, kind: str) -> GammaPriorSpec:
    if kind == "structured":
        return prior
    if kind == "diagonal":
        return diagonal_variant(prior)
    if kind == "spatial":
        return spatial_only_variant(prior)
    raise InputError(f"unknown prior variant {kind!r}")


def with_parameter(prior: GammaPriorSpec, name: str, value: float) -> GammaPriorSpec:
    """Copy of ``prior`` with one hyperparameter replaced (grid search)."""
    if name == "mean_level":
        return replace(prior, mean_level=float(value))
    if name in ("lengthscale", "magnitude"):
        if prior.spatial.kind not in ("se", "diag") or (name == "lengthscale" and prior.spatial.kind != "se"):
            raise InputError(f"spatial kernel {prior.spatial.kind!r} has no {name}")
        return replace(prior, spatial=replace(prior.spatial, **{name: float(value)}))
    if name == "temporal_lengthscale":
        return replace(prior, temporal=replace(prior.temporal, lengthscale=float(value)))
    if name == "temporal_alpha":
        return replace(prior, temporal=replace(prior.temporal, alpha=float(value)))
    raise InputError(f"unknown grid parameter {name!r}")


def grid_values(spec) -> list[float]:
    if isinstance(spec, dict):
        return [float(v) for v in np.linspace(spec["start"], spec["stop"], int(spec["num"]))]
    vals = [float(v) for v in spec]
    if not vals:
        raise InputError("grid must not be empty")
    return vals


# -- solvers

def solve_method(method: dict, A, Y, noise_variance, truth, prior: GammaPriorSpec, slab: SlabParams, ep_cfg: dict):
    """Run one configured method; returns (x estimate, support probabilities, info)."""
    name = method["name"]
    kind = method.get("solver", "ep")
    if kind == "omp":
        X = np.zeros_like(truth)
        for t in range(Y.shape[1]):
            k = int(np.count_nonzero(truth[:, t]))
            X[:, t] = omp(A, Y[:, t], k)
        return X, (X != 0).astype(float), {"iterations": 0, "converged": True, "log_evidence": float("nan")}
    if kind == "oracle":
        X = np.zeros_like(truth)
        lam = float(method.get("ridge", 1e-3))
        for t in range(Y.shape[1]):
            X[:, t] = oracle_ridge(A, Y[:, t], truth[:, t] != 0, lam)
        return X, (truth != 0).astype(float), {"iterations": 0, "converged": True, "log_evidence": float("nan")}
    if kind != "ep":
        raise InputError(f"unknown solver {kind!r} for method {name!r}")
    p = variant(prior, method.get("prior", "structured"))
    cfg = ep_config_from(ep_cfg, method.get("scheme", "full"))
    res = run_ep(Problem(A, Y, GAUSSIAN, noise_variance), p, slab, cfg)
    info = {"iterations": res.iterations, "converged": res.converged, "log_evidence": res.log_evidence}
    return res.x_mean, res.support_prob, info


def _phase_job(job: dict) -> list[dict]:
    prior, slab = job["prior"], job["slab"]
    D = prior.D
    sig_ss = child_seed(job["seed"], job["trial"])
    sample = sample_prior_conditioned(
        job["gen_prior"], slab, job["K"], seed=sig_ss, max_tries=job["max_tries"]
    )
    X0 = sample.coefficients
    meas_ss = child_seed(job["seed"], job["trial"], job["ratio_index"])
    rng = np.random.default_rng(meas_ss)
    N = job["N"]
    A = gaussian_ensemble(N, D, rng, normalize=job["normalize"])
    Y, s2 = add_noise(A @ X0, job["snr_db"], rng)
    rows, times = [], []
    for method in job["methods"]:
        row = {"ratio": job["ratio"], "N": N, "trial": job["trial"], "method": method["name"],
               "seed": _seed_int(meas_ss), "error": ""}
        t0 = time.perf_counter()
        try:
            X, probs, info = solve_method(method, A, Y, s2, X0, prior, slab, job["ep"])
            m = evaluate(X, np.clip(probs, 0.0, 1.0), X0)
            row.update(nmse=m.nmse, f_measure=m.f_measure, precision=m.precision, recall=m.recall, **info)
        except (StSpikeError, np.linalg.LinAlgError, FloatingPointError) as exc:
            row.update(nmse=float("nan"), f_measure=float("nan"), precision=float("nan"), recall=float("nan"),
                       iterations=0, converged=False, log_evidence=float("nan"),
                       error=f"{type(exc).__name__}: {exc}".replace("\n", " "))
        rows.append(row)
        times.append({"ratio": job["ratio"], "N": N, "trial": job["trial"], "method": method["name"],
                      "wall_time": time.perf_counter() - t0})
    return rows, times, int(sample.exact)


def _run_jobs(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


DEFAULT_METHODS = [
    {"name": "EP", "solver": "ep", "prior": "structured", "scheme": "full"},
    {"name": "IEP", "solver": "ep", "prior": "diagonal", "scheme": "full"},
    {"name": "OMP", "solver": "omp"},
    {"name": "oracle", "solver": "oracle"},
]


def phase_transition(
    prior: GammaPriorSpec,
    slab: SlabParams,
    K: int,
    ratios,
    trials: int,
    seed: int,
    snr_db: float = 20.0,
    methods=None,
    ep: Optional[dict] = None,
    workers: int = 1,
    normalize: bool = True,
    max_tries: int = 10_000,
) -> dict:
    """Undersampling sweep; one row per (ratio, trial, method).

    Signals are drawn once per trial from ``prior`` conditioned on K
    nonzeros; forward model and noise are drawn per (trial, ratio). The EP
    methods use the prior mean shifted so that the expected support size is
    K, which is the prior the conditioned signals effectively come from.
    """
    methods = list(methods or DEFAULT_METHODS)
    names = [m["name"] for m in methods]
    if len(set(names)) != len(names):
        raise InputError("method names must be unique")
    D = prior.D
    infer_prior = replace(prior, mean_level=prior.mean_level + _mean_shift_for(prior, K))
    jobs = []
    for ri, ratio in enumerate(ratios):
        N = max(1, int(round(ratio * D)))
        for trial in range(trials):
            jobs.append(dict(prior=infer_prior, gen_prior=prior, slab=slab, K=K, ratio=float(ratio), ratio_index=ri,
                             N=N, trial=trial, seed=seed, snr_db=snr_db, methods=methods, ep=ep or {},
                             normalize=normalize, max_tries=max_tries))
    out = _run_jobs(_phase_job, jobs, workers)
    rows = [r for rs, _, _ in out for r in rs]
    timing = [t for _, ts, _ in out for t in ts]
    order = {n: i for i, n in enumerate(names)}
    key = lambda r: (r["ratio"], r["trial"], order[r["method"]])  # noqa: E731
    rows.sort(key=key)
    timing.sort(key=key)
    return {"rows": rows, "timing": timing, "summary": summarize(rows, names),
            "inference_mean_level": infer_prior.mean_level, "inexact_samples": sum(1 - e for _, _, e in out)}


def summarize(rows, names) -> list[dict]:
    out = []
    ratios = sorted({r["ratio"] for r in rows})
    for ratio in ratios:
        for name in names:
            sel = [r for r in rows if r["ratio"] == ratio and r["method"] == name and not r["error"]]
            if not sel:
                continue
            nm = np.array([r["nmse"] for r in sel])
            out.append({
                "ratio": ratio, "method": name, "trials": len(sel),
                "nmse_mean": float(np.mean(nm)),
                "nmse_db": float(10.0 * np.log10(np.mean(nm))) if np.mean(nm) > 0 else float("-inf"),
                "f_measure_mean": float(np.mean([r["f_measure"] for r in sel])),
                "precision_mean": float(np.mean([r["precision"] for r in sel])),
                "recall_mean": float(np.mean([r["recall"] for r in sel])),
                "iterations_mean": float(np.mean([r["iterations"] for r in sel])),
            })
    return out


SUMMARY_COLUMNS = ["ratio", "method", "trials", "nmse_mean", "nmse_db", "f_measure_mean",
                   "precision_mean", "recall_mean", "iterations_mean"]


# -- grid search

def _grid_job(job: dict) -> dict:
    prior = with_parameter(job["prior"], job["parameter"], job["value"])
    row = {"index": job["index"], "value": job["value"], "error": ""}
    try:
        cfg = ep_config_from(job["ep"])
        res = run_ep(job["problem"], prior, job["slab"], cfg)
        row.update(log_evidence=res.log_evidence, iterations=res.iterations, converged=res.converged)
        truth = job.get("truth")
        if truth is not None:
            f, p, r = support_scores(res.support_prob > 0.5, truth != 0)
            row.update(nmse=nmse(res.x_mean, truth), f_measure=f, precision=p, recall=r)
        return row, res.gamma_mean.T.ravel(), res.support_prob.T.ravel()
    except (StSpikeError, np.linalg.LinAlgError) as exc:
        row.update(log_evidence=float("nan"), iterations=0, converged=False,
                   error=f"{type(exc).__name__}: {exc}".replace("\n", " "))
        n = job["prior"].D * job["prior"].T
        return row, np.full(n, np.nan), np.full(n, np.nan)


GRID_COLUMNS = ["index", "value", "log_evidence", "iterations", "converged", "nmse", "f_measure",
                "precision", "recall", "error"]


def gridsearch(problem: Problem, prior: GammaPriorSpec, slab: SlabParams, parameter: str, values,
               ep: Optional[dict] = None, truth=None, workers: int = 1) -> dict:
    """Evaluate the EP evidence along a one-parameter grid.

    The selected point maximizes the evidence; ties go to the smaller value.
    Failed points are kept as rows with an error message.
    """
    values = grid_values(values)
    jobs = [dict(index=i, value=v, prior=prior, parameter=parameter, problem=problem, slab=slab, ep=ep or {},
                 truth=truth) for i, v in enumerate(values)]
    out = _run_jobs(_grid_job, jobs, workers)
    rows = [o[0] for o in out]
    gammas = np.stack([o[1] for o in out])
    probs = np.stack([o[2] for o in out])
    best = None
    for r in rows:
        ev = r["log_evidence"]
        if not math.isfinite(ev):
            continue
        if best is None or ev > best["log_evidence"] or (ev == best["log_evidence"] and r["value"] < best["value"]):
            best = r
    return {"rows": rows, "gamma_mean": gammas, "support_prob": probs, "best": best}


def experiment1_problem(seed: int, D: int = 200, ratio: float = 0.5, snr_db: float = 20.0):
    """Cosine-cluster signal, unnormalized N(0, 1) forward model, noise at ``snr_db``."""
    rng = np.random.default_rng(child_seed(seed, 0))
    x0 = cosine_cluster_signal(D)
    N = int(round(ratio * D))
    A = gaussian_ensemble(N, D, rng, normalize=False)
    y, s2 = add_noise(A @ x0, snr_db, rng)
    return Problem(A, y, GAUSSIAN, s2), x0[:, None]


def experiment1_prior(D: int = 200, lengthscale: float = 5.0, magnitude: float = 5.0, mean_level: float = 0.0):
    return GammaPriorSpec(mean_level, KernelFactor.se(np.arange(D, dtype=float), lengthscale, magnitude),
                          KernelFactor.identity(1))


__all__ = [
    "add_noise", "cosine_cluster_signal", "diagonal_variant", "empirical_snr_db", "experiment1_prior",
    "experiment1_problem", "gaussian_ensemble", "gridsearch", "phase_transition", "prior_from_config",
    "spatial_only_variant",
]
