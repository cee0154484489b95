"""Command-line front end: sample | solve | gridsearch | phase-transition.

Every command reads a JSON config (validated against the shipped schema),
writes CSV matrices/tables and a JSON metadata file into ``--out``. Exit
codes: 0 success, 2 invalid input or config, 3 numerical failure, 4 I/O
error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .engine import run_ep
from .errors import InputError, NumericalError
from .experiments import (
    GRID_COLUMNS,
    ROW_COLUMNS,
    SUMMARY_COLUMNS,
    add_noise,
    child_seed,
    cosine_cluster_signal,
    empirical_snr_db,
    ep_config_from,
    gaussian_ensemble,
    gridsearch,
    phase_transition,
    prior_from_config,
    slab_from_config,
)
from .io import (
    load_config,
    read_matrix,
    write_ep_result,
    write_json,
    write_matrix,
    write_prior_sample,
    write_table,
)
from .likelihoods import GAUSSIAN, PROBIT, Problem
from .metrics import evaluate
from .prior import sample_prior, sample_prior_conditioned

log = logging.getLogger("stspike")

EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _require(cfg: dict, key: str, command: str) -> dict:
    if key not in cfg:
        raise InputError(f"'{command}' needs a '{key}' section in the config")
    return cfg[key]


def _seed(args, cfg) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _draw_sample(prior, slab, K, seed, max_tries=10_000):
    if K is None:
        return sample_prior(prior, slab, seed=seed)
    return sample_prior_conditioned(prior, slab, int(K), seed=seed, max_tries=max_tries)


def cmd_sample(args, cfg) -> dict:
    prior = prior_from_config(_require(cfg, "prior", "sample"), cfg.get("_base_dir"))
    slab = slab_from_config(cfg.get("slab"))
    scfg = cfg.get("sample", {})
    seed = _seed(args, cfg)
    sample = _draw_sample(prior, slab, scfg.get("K"), seed, scfg.get("max_tries", 10_000))
    write_prior_sample(args.out, sample, {"command": "sample", "config": _echo(cfg)})
    return {"nonzeros": int(sample.support.sum())}


def _load_problem(cfg: dict, seed: int, prior, slab, out: Path):
    """Problem from CSV paths, or synthesized from the prior and written to ``out``."""
    base = cfg.get("_base_dir")
    if "problem" in cfg:
        p = cfg["problem"]

        def path(key):
            q = Path(p[key])
            return q if q.is_absolute() or base is None else Path(base) / q

        A, Y = read_matrix(path("A")), read_matrix(path("Y"))
        lik = p.get("likelihood", GAUSSIAN)
        problem = Problem(A, Y, lik, p.get("noise_variance") if lik == GAUSSIAN else None)
        truth = read_matrix(path("truth")) if "truth" in p else None
        test = (read_matrix(path("test_A")), read_matrix(path("test_Y"))) if "test_A" in p else None
        return problem, truth, test, {}
    syn = _require(cfg, "synthetic", "solve")
    rng = np.random.default_rng(child_seed(seed, 1))
    if syn.get("signal", "prior") == "cosine_clusters":
        if prior.T != 1:
            raise InputError("the cosine-cluster signal is a single column (T = 1)")
        X0 = cosine_cluster_signal(prior.D)[:, None]
    else:
        K = syn.get("K")
        X0 = _draw_sample(prior, slab, K, child_seed(seed, 0)).coefficients
    A = gaussian_ensemble(int(syn["N"]), prior.D, rng, normalize=syn.get("normalize_columns", True))
    clean = A @ X0
    Y, s2 = add_noise(clean, float(syn.get("snr_db", 20.0)), rng)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "A.csv", A)
    write_matrix(out / "Y.csv", Y)
    write_matrix(out / "truth.csv", X0)
    info = {"noise_variance": s2, "snr_db_empirical": empirical_snr_db(clean, Y)}
    return Problem(A, Y, GAUSSIAN, s2), X0, None, info


def cmd_solve(args, cfg) -> dict:
    seed = _seed(args, cfg)
    prior = prior_from_config(_require(cfg, "prior", "solve"), cfg.get("_base_dir"))
    slab = slab_from_config(cfg.get("slab"))
    out = Path(args.out)
    problem, truth, test, info = _load_problem(cfg, seed, prior, slab, out)
    ep = ep_config_from(cfg.get("ep"), args.scheme)
    res = run_ep(problem, prior, slab, ep)
    extra = {"command": "solve", "seed": seed, "config": _echo(cfg), **info}
    if truth is not None and np.any(truth):
        m = evaluate(res.x_mean, res.support_prob, truth)
        extra["metrics"] = m._asdict()
    if problem.likelihood == PROBIT:
        extra["train_accuracy"] = _accuracy(problem.A, res.x_mean, problem.Y)
        if test is not None:
            extra["test_accuracy"] = _accuracy(test[0], res.x_mean, test[1])
    write_ep_result(out, res, extra)
    return {"converged": res.converged, "iterations": res.iterations}


def _accuracy(A, x_mean, labels) -> float:
    """Share of labels matched by the sign of the posterior-mean projection."""
    pred = np.where(A @ x_mean >= 0.0, 1.0, -1.0)
    return float(np.mean(pred == labels))


def cmd_gridsearch(args, cfg) -> dict:
    seed = _seed(args, cfg)
    prior = prior_from_config(_require(cfg, "prior", "gridsearch"), cfg.get("_base_dir"))
    slab = slab_from_config(cfg.get("slab"))
    grid = _require(cfg, "grid", "gridsearch")
    out = Path(args.out)
    problem, truth, _, info = _load_problem(cfg, seed, prior, slab, out)
    ep = asdict(ep_config_from(cfg.get("ep"), args.scheme))
    res = gridsearch(problem, prior, slab, grid["parameter"], grid["values"], ep, truth, args.workers)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "gridsearch.csv", res["rows"], GRID_COLUMNS)
    write_matrix(out / "gamma_mean_trace.csv", res["gamma_mean"])
    write_matrix(out / "support_prob_trace.csv", res["support_prob"])
    write_json(out / "gridsearch.json", {
        "command": "gridsearch", "seed": seed, "parameter": grid["parameter"], "best": res["best"],
        "config": _echo(cfg), **info,
    })
    return {"best": res["best"]}


def cmd_phase_transition(args, cfg) -> dict:
    seed = _seed(args, cfg)
    prior = prior_from_config(_require(cfg, "prior", "phase-transition"), cfg.get("_base_dir"))
    slab = slab_from_config(cfg.get("slab"))
    ph = _require(cfg, "phase", "phase-transition")
    ep = asdict(ep_config_from(cfg.get("ep"), args.scheme))
    ep.pop("scheme")  # each method names its own scheme
    res = phase_transition(
        prior, slab, int(ph["K"]), ph["ratios"], int(ph["trials"]), seed,
        snr_db=float(ph.get("snr_db", 20.0)), methods=ph.get("methods"), ep=ep, workers=args.workers,
        normalize=ph.get("normalize_columns", True), max_tries=int(ph.get("max_tries", 10_000)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "rows.csv", res["rows"], ROW_COLUMNS)
    write_table(out / "summary.csv", res["summary"], SUMMARY_COLUMNS)
    write_table(out / "timing.csv", res["timing"], ["ratio", "N", "trial", "method", "wall_time"])
    write_json(out / "phase_transition.json", {
        "command": "phase-transition", "seed": seed, "inference_mean_level": res["inference_mean_level"],
        "inexact_samples": res["inexact_samples"], "config": _echo(cfg),
    })
    return {"rows": len(res["rows"])}


def _echo(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


COMMANDS = {
    "sample": cmd_sample,
    "solve": cmd_solve,
    "gridsearch": cmd_gridsearch,
    "phase-transition": cmd_phase_transition,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stspike", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--workers", type=int, default=1, help="parallel worker processes for sweeps")
        p.add_argument("--scheme", default=None, help="Gamma update scheme, e.g. full, cp, lowrank:0.99, group:5x10+cp")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise InputError("--seed must be nonnegative")
        if args.workers < 1:
            raise InputError("--workers must be >= 1")
        cfg = load_config(args.config)
        summary = COMMANDS[args.command](args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    log.info("%s done: %s", args.command, summary)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
