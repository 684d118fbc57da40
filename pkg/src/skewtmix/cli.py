"""Command-line front end: ``skewtmix fit | sample | density``.

Exit codes: 0 success, 1 input error, 2 fit stopped at max-iter without
converging (report still written), 3 every start collapsed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np
import yaml

from . import __version__
from .em import DegenerateComponentError, FitConfig, fit
from .model import cfust_logpdf, load_model, model_to_dict, sample_mixture
from .specfun import CdfPrecision

log = logging.getLogger("skewtmix")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_DEGENERATE = 0, 1, 2, 3

CONFIG_KEYS = {
    "g": int,
    "q": int,
    "structure": str,
    "skew_structure": str,
    "e1_method": str,
    "max_iter": int,
    "tol": float,
    "seed": int,
    "n_starts": int,
    "threads": int,
    "init": str,
    "series_r_max": int,
    "series_tol": float,
    "series_fallback": str,
    "mc_samples": int,
    "df_bounds": lambda v: tuple(float(x) for x in v),
    "cdf_abs_tol": float,
    "cdf_max_points": int,
}


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 1."""


@dataclass
class Dataset:
    columns: list
    values: np.ndarray
    path: str


def _is_number(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def read_dataset(path) -> Dataset:
    """Read a headed numeric CSV; every cell must be a finite number."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open data file {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file (a header row is required)") from None
        except csv.Error as exc:
            raise InputError(f"{path}: line 1: {exc}") from exc
        header = [h.strip() for h in header]
        if not header or all(_is_number(h) for h in header):
            raise InputError(f"{path}: line 1: missing header row")
        rows = []
        try:
            for row in reader:
                line = reader.line_num
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) != len(header):
                    raise InputError(f"{path}: line {line}: expected {len(header)} fields, "
                                     f"found {len(row)}")
                try:
                    vals = [float(cell) for cell in row]
                except ValueError:
                    raise InputError(f"{path}: line {line}: non-numeric value") from None
                if not all(math.isfinite(v) for v in vals):
                    raise InputError(f"{path}: line {line}: non-finite value")
                rows.append(vals)
        except csv.Error as exc:
            raise InputError(f"{path}: line {reader.line_num}: {exc}") from exc
    values = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return Dataset(header, values, str(path))


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def _read_model(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise InputError(f"cannot open model file {path}: {exc.strerror}") from exc
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise InputError(f"invalid model file {path}: {exc}") from exc


def _load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise InputError(f"cannot open config file {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise InputError(f"invalid config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"config file {path} must be a flat mapping")
    out = {}
    for key, value in doc.items():
        key = str(key).replace("-", "_")
        if key not in CONFIG_KEYS:
            raise InputError(f"config file {path}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except (TypeError, ValueError) as exc:
            raise InputError(f"config file {path}: bad value for {key}: {value!r}") from exc
    if "skew_structure" in out:
        out.setdefault("structure", out.pop("skew_structure"))
    return out


def build_config(args, p):
    """Merge defaults, optional config file and flags (flags win)."""
    settings = {"g": 1, "structure": "full", "e1_method": "series", "seed": 0}
    if args.config:
        settings.update(_load_config(args.config))
    for key in ("g", "q", "structure", "e1_method", "max_iter", "tol", "seed", "n_starts",
                "threads", "init"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    prec = {}
    if "cdf_abs_tol" in settings:
        prec["abs_tol"] = settings.pop("cdf_abs_tol")
    if "cdf_max_points" in settings:
        prec["max_points"] = settings.pop("cdf_max_points")
    settings["skew_structure"] = settings.pop("structure")
    try:
        config = FitConfig(cdf_precision=CdfPrecision(**prec), **settings)
        config.q_for(p)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from exc
    return config


def config_echo(config: FitConfig, p):
    return {
        "g": config.g,
        "q": config.q_for(p),
        "structure": config.skew_structure.value,
        "e1_method": config.e1_method,
        "max_iter": config.max_iter,
        "tol": config.tol,
        "seed": config.seed,
        "n_starts": config.n_starts,
        "threads": config.threads,
        "init": config.init,
        "series_r_max": config.series_r_max,
        "series_tol": config.series_tol,
        "series_fallback": config.series_fallback,
        "mc_samples": config.mc_samples,
        "df_bounds": list(config.df_bounds),
        "cdf_abs_tol": config.cdf_precision.abs_tol,
        "cdf_max_points": config.cdf_precision.max_points,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def cmd_fit(args):
    data = read_dataset(args.data)
    if data.values.shape[0] == 0:
        raise InputError(f"{args.data}: no data rows")
    config = build_config(args, data.values.shape[1])
    start = time.perf_counter()
    try:
        result = fit(data.values, config)
    except DegenerateComponentError as exc:
        log.error("fit failed: %s", exc)
        print(f"error: every start collapsed ({exc})", file=sys.stderr)
        return EXIT_DEGENERATE
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    elapsed = time.perf_counter() - start
    report = {
        "schema_version": SCHEMA_VERSION,
        "software_version": __version__,
        "seed": config.seed,
        "config": config_echo(config, data.values.shape[1]),
        "data": {"path": os.path.basename(data.path), "columns": data.columns,
                 "n": int(data.values.shape[0]), "p": int(data.values.shape[1])},
        "model": model_to_dict(result.psi),
        "loglik": result.loglik,
        "loglik_trace": result.loglik_trace,
        "iterations": result.iterations,
        "converged": result.converged,
        "bic": result.bic,
        "aic": result.aic,
        "labels": [int(v) + 1 for v in result.labels],
        "diagnostics": result.diagnostics,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(report), fh, indent=2)
        fh.write("\n")
    with open(f"{args.out}.timing.json", "w", encoding="utf-8") as fh:
        json.dump({"wall_clock_seconds": elapsed}, fh)
        fh.write("\n")
    if args.responsibilities:
        g = result.psi.g
        write_csv(args.responsibilities, [f"resp_{h + 1}" for h in range(g)],
                  result.responsibilities.tolist())
    log.info("fit finished: loglik %.6f after %d iterations", result.loglik, result.iterations)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_sample(args):
    psi = _read_model(args.model)
    if args.n < 0:
        raise InputError("--n must be nonnegative")
    y, labels = sample_mixture(psi, args.n, seed=args.seed)
    header = [f"y{k + 1}" for k in range(psi.p)] + (["label"] if args.labels else [])
    rows = []
    for j in range(args.n):
        row = [float(v) for v in y[j]]
        if args.labels:
            row.append(int(labels[j]) + 1)
        rows.append(row)
    write_csv(args.out, header, rows)
    return EXIT_OK


def cmd_density(args):
    psi = _read_model(args.model)
    data = read_dataset(args.data)
    if data.values.shape[1] != psi.p:
        raise InputError(f"{args.data}: expected p = {psi.p} columns, found "
                         f"{data.values.shape[1]}")
    g = psi.g
    header = (["logpdf"] + [f"logpdf_{h + 1}" for h in range(g)]
              + [f"resp_{h + 1}" for h in range(g)])
    rows = []
    if data.values.shape[0]:
        comp = np.stack([cfust_logpdf(data.values, c) for c in psi.components], axis=1)
        with np.errstate(divide="ignore"):
            weighted = comp + np.log(psi.weights)[None, :]
        total = np.logaddexp.reduce(weighted, axis=1)
        resp = np.full_like(weighted, 1.0 / g)
        live = np.isfinite(total)
        resp[live] = np.exp(weighted[live] - total[live, None])
        for j in range(data.values.shape[0]):
            rows.append([float(total[j])] + [float(v) for v in comp[j]]
                        + [float(v) for v in resp[j]])
    write_csv(args.out, header, rows)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors (exit 1); exit 2 means non-convergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(
        prog="skewtmix",
        description="Fit, sample and evaluate finite mixtures of canonical fundamental "
                    "skew t distributions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a mixture by EM")
    p_fit.add_argument("--data", required=True, help="CSV file with a header row")
    p_fit.add_argument("--out", required=True, help="JSON run report to write")
    p_fit.add_argument("--g", type=int, help="number of components")
    p_fit.add_argument("--q", type=int, help="skewness dimension")
    p_fit.add_argument("--structure", choices=["full", "diagonal", "single-column"])
    p_fit.add_argument("--e1-method", dest="e1_method", choices=["series", "osl", "mc"])
    p_fit.add_argument("--max-iter", dest="max_iter", type=int)
    p_fit.add_argument("--tol", type=float, help="relative log-likelihood tolerance")
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--n-starts", dest="n_starts", type=int)
    p_fit.add_argument("--threads", type=int, help="worker cap; results do not depend on it")
    p_fit.add_argument("--init", choices=["kmeans", "random"])
    p_fit.add_argument("--config", help="YAML file of FitConfig keys")
    p_fit.add_argument("--responsibilities", help="optional CSV of final responsibilities")
    p_fit.set_defaults(func=cmd_fit)

    p_sample = sub.add_parser("sample", help="draw from a fitted or hand-written model")
    p_sample.add_argument("--model", required=True, help="model JSON or fit report")
    p_sample.add_argument("--n", type=int, required=True)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", required=True)
    p_sample.add_argument("--labels", action="store_true", help="add a 1-based label column")
    p_sample.set_defaults(func=cmd_sample)

    p_dens = sub.add_parser("density", help="per-row log-densities and responsibilities")
    p_dens.add_argument("--model", required=True)
    p_dens.add_argument("--data", required=True)
    p_dens.add_argument("--out", required=True)
    p_dens.set_defaults(func=cmd_density)
    return parser


def main(argv=None):
    level = os.environ.get("SKEWTMIX_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
