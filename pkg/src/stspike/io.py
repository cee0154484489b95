"""CSV and JSON input/output.

Matrices are plain CSV (row-major, no header) written with 17 significant
digits so that a write/read cycle is the identity. Tables carry a header row
and use the shortest exact float representation.
Metadata is JSON with a ``schema_version`` field.
"""
from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"


def write_matrix(path, matrix) -> Path:
    path = Path(path)
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[:, None]
    fmt = "%d" if np.issubdtype(m.dtype, np.integer) else FLOAT_FORMAT
    np.savetxt(path, m, delimiter=",", fmt=fmt)
    return path


def read_matrix(path, ndmin: int = 2) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"matrix file not found: {path}")
    try:
        m = np.loadtxt(path, delimiter=",", ndmin=ndmin, dtype=float)
    except ValueError as exc:
        raise InputError(f"cannot parse {path}: {exc}") from exc
    if not np.all(np.isfinite(m)):
        raise InputError(f"{path} contains non-finite values")
    return m


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest string that parses back to the same double
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_table(path, rows: Sequence[Mapping], columns: Sequence[str]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])
    return path


def read_table(path) -> list[dict]:
    """Rows as dicts; numeric-looking cells come back as float or int."""

    def conv(s: str):
        if s == "":
            return None
        try:
            return int(s)
        except ValueError:
            pass
        try:
            return float(s)
        except ValueError:
            return s

    with Path(path).open(newline="") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, payload: Mapping) -> Path:
    path = Path(path)
    body = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON in {path}: {exc}") from exc


def config_schema() -> dict:
    return json.loads(resources.files("stspike").joinpath("config.schema.json").read_text())


def validate_config(config: Mapping) -> dict:
    import jsonschema

    try:
        jsonschema.validate(config, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config error at {where}: {exc.message}") from None
    return dict(config)


def load_config(path) -> dict:
    cfg = read_json(path)
    cfg = validate_config(cfg)
    cfg["_base_dir"] = str(Path(path).resolve().parent)
    return cfg


def write_prior_sample(out_dir, sample, extra: Mapping | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        write_matrix(out / "gamma.csv", sample.gamma),
        write_matrix(out / "support.csv", sample.support.astype(np.int64)),
        write_matrix(out / "coefficients.csv", sample.coefficients),
    ]
    meta = {
        "seed": sample.seed,
        "shape": list(sample.gamma.shape),
        "nonzeros": int(np.sum(sample.support)),
        "mean_shift": sample.mean_shift,
        "tries": sample.tries,
        "exact_cardinality": bool(sample.exact),
    }
    meta.update(extra or {})
    paths.append(write_json(out / "sample.json", meta))
    return paths


def write_ep_result(out_dir, result, extra: Mapping | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        write_matrix(out / "x_mean.csv", result.x_mean),
        write_matrix(out / "x_var.csv", result.x_var),
        write_matrix(out / "support_prob.csv", result.support_prob),
        write_matrix(out / "gamma_mean.csv", result.gamma_mean),
        write_matrix(out / "gamma_var.csv", result.gamma_var),
        write_table(
            out / "trace.csv",
            [{"iteration": i + 1, "log_evidence": e, "max_change": c, "max_site_change": sc}
             for i, (e, c, sc) in enumerate(zip(result.evidence_trace, result.change_trace,
                                                result.site_change_trace))],
            ["iteration", "log_evidence", "max_change", "max_site_change"],
        ),
    ]
    meta = result.summary()
    meta.update(extra or {})
    paths.append(write_json(out / "result.json", meta))
    return paths


def as_list(values: Iterable) -> list:
    return [v.item() if hasattr(v, "item") else v for v in values]
