"""Command-line front end.

Subcommands: simulate, smooth, select-lambda, stream, bench.  Model and
scenario configurations are JSON files (schema documented in the README);
tabular outputs are plain CSV with a header row, comma separators, and
round-trippable float formatting, so runs with a fixed seed are
byte-reproducible.

Exit codes: 0 success, 2 usage error, 3 configuration/file error,
4 model or dimension validation error, 5 solver/runtime failure.  Errors
are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .admm import admm_drs
from .baselines import HuberConfig, RansacConfig, huber_smoother, ransac_smoother
from .bench import ExperimentSpec, run_experiment
from .coordinate import DrsConfig, drs_fixed_interval
from .errors import ConfigError, DrsmoothError, ModelValidationError
from .fixed_lag import OnlineFixedLagDrs
from .kalman import (fixed_interval_ks, smoother_to_json_dict,
                     write_smoother_csv)
from .lambda_select import (build_grid, lambda_bounds, select_avd,
                            select_known_fraction, selection_to_csv, solve_path)
from .model import (model_from_dict, read_trajectory_csv, scenario_from_dict,
                    simulate, write_trajectory_csv)

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_VALIDATION = 4
EXIT_RUNTIME = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_USAGE, "usage", message)


def _fail(code: int, kind: str, message: str):
    sys.stderr.write(json.dumps({"error": message, "kind": kind,
                                 "exit_code": code}) + "\n")
    sys.exit(code)


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        _fail(EXIT_CONFIG, "config", f"file not found: {path}")
    except json.JSONDecodeError as exc:
        _fail(EXIT_CONFIG, "config", f"malformed JSON in {path}: {exc}")


def _out_path(args, name: str) -> str:
    base = args.outdir or os.environ.get("DRSMOOTH_OUTDIR", ".")
    os.makedirs(base, exist_ok=True)
    return os.path.join(base, name)


def _load_observations(path: str):
    try:
        _, obs, _ = read_trajectory_csv(path)
    except FileNotFoundError:
        _fail(EXIT_CONFIG, "config", f"file not found: {path}")
    except (ValueError, KeyError) as exc:
        _fail(EXIT_CONFIG, "config", f"bad observation CSV {path}: {exc}")
    return obs


def _cmd_simulate(args):
    cfg = scenario_from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    states, obs, outliers = simulate(cfg)
    out = args.out or _out_path(args, "trajectory.csv")
    write_trajectory_csv(out, states, obs, outliers)
    print(out)
    return 0


def _smooth_output(args, model, obs):
    method = args.method
    if method == "ks":
        return fixed_interval_ks(model, obs)
    if method == "drs-cd":
        cfg = DrsConfig(lambda_x=args.lambda_x, lambda_y=args.lambda_y,
                        tol=args.tol, max_sweeps=args.max_sweeps)
        return drs_fixed_interval(model, obs, cfg)
    if method == "drs-admm":
        return admm_drs(model, obs, args.lambda_x, args.lambda_y,
                        kappa=args.kappa, max_iters=args.max_iters, tol=args.tol)
    if method == "huber":
        return huber_smoother(model, obs, HuberConfig(threshold=args.huber_threshold))
    if method == "ransac":
        rcfg = RansacConfig(draws=args.draws, inlier_threshold=args.inlier_threshold,
                            sample_states=args.sample_states, seed=args.seed or 0)
        return ransac_smoother(model, obs, rcfg, then_huber=args.then_huber)
    raise ConfigError(f"unknown method {method}")


def _cmd_smooth(args):
    model = model_from_dict(_load_json(args.model_config))
    obs = _load_observations(args.observations)
    out = _smooth_output(args, model, obs)
    prefix = args.out_prefix or _out_path(args, "smooth")
    write_smoother_csv(prefix + ".csv", out)
    with open(prefix + ".json", "w") as fh:
        json.dump(smoother_to_json_dict(out), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(prefix + ".csv")
    return 0


def _cmd_select_lambda(args):
    model = model_from_dict(_load_json(args.model_config))
    obs = _load_observations(args.observations)
    try:
        ix, iy = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        _fail(EXIT_USAGE, "usage", f"bad --grid {args.grid!r}, expected e.g. 10x10")
    bounds = lambda_bounds(model, obs)
    grid = build_grid(bounds, Ix=ix, Iy=iy, floor_ratio=args.floor_ratio)
    path = solve_path(model, obs, grid, tol=args.tol,
                      max_sweeps=args.max_sweeps, use_dense_ops=True)
    if args.criterion == "avd":
        sel = select_avd(path, model, obs)
    else:
        sel = select_known_fraction(path, model, obs, args.pi_x, args.pi_y)
    table = args.out or _out_path(args, "selection.csv")
    selection_to_csv(table, sel)
    summary = {"criterion": args.criterion, "ix": sel.ix, "iy": sel.iy,
               "lambda_x": sel.lambda_x, "lambda_y": sel.lambda_y,
               "bound_x": bounds[0], "bound_y": bounds[1]}
    with open(os.path.splitext(table)[0] + ".json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(table)
    return 0


def _cmd_stream(args):
    model = model_from_dict(_load_json(args.model_config))
    if args.observations == "-":
        rows = []
        for line in sys.stdin:
            line = line.strip()
            if not line or line.lower().startswith("n,"):
                continue
            vals = [float(v) for v in line.split(",")]
            rows.append(vals[1:] if len(vals) == model.Dy + 1 else vals)
        ys = [np.asarray(r, dtype=float) for r in rows]
    else:
        obs = _load_observations(args.observations)
        ys = list(obs.y)
    out = args.out or _out_path(args, "stream.csv")
    lam_x, lam_y = args.lambda_x, args.lambda_y
    if args.method == "ks":
        # huge penalties keep the outlier fields at zero: plain fixed-lag KS
        lam_x = lam_y = float("inf")
    with open(out, "w", newline="") as fh:
        fh.write("n," + ",".join(f"xhat_{i + 1}" for i in range(model.Dx)) + "\n")
        online = OnlineFixedLagDrs(
            model, lag=args.lag, window=args.window,
            sweeps_per_step=args.sweeps,
            lambda_x=lam_x, lambda_y=lam_y,
            method="admm" if (args.method == "drs-admm" or model.generalized) else "cd",
            kappa=args.kappa)
        for y in ys:
            est = online.step(np.asarray(y, dtype=float))
            if est is not None:
                n = online.emitted[-1][0]
                fh.write(str(n) + "," + ",".join(repr(float(v)) for v in est) + "\n")
        for n, est in online.flush():
            fh.write(str(n) + "," + ",".join(repr(float(v)) for v in est) + "\n")
    print(out)
    return 0


def _cmd_bench(args):
    spec = ExperimentSpec.from_dict(_load_json(args.experiment))
    if args.M is not None:
        spec.M = args.M
    if args.seed is not None:
        spec.seed = args.seed
    result = run_experiment(spec)
    base = args.outdir or os.environ.get("DRSMOOTH_OUTDIR", ".")
    os.makedirs(base, exist_ok=True)
    long_csv = os.path.join(base, "rmse_long.csv")
    report_json = os.path.join(base, "report.json")
    result.write_long_csv(long_csv)
    with open(report_json, "w") as fh:
        json.dump(result.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(report_json)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drsmooth",
                description="Doubly robust smoothing of linear dynamical "
                            "processes with sparse state and measurement outliers.",
                epilog="Exit codes: 0 success, 2 usage, 3 config file, "
                       "4 validation, 5 solver/runtime.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    ps = sub.add_parser("simulate", formatter_class=fmt,
                        help="simulate a contaminated trajectory to CSV")
    ps.add_argument("--config", required=True, help="scenario JSON file")
    ps.add_argument("--seed", type=int, default=None, help="override scenario seed")
    ps.add_argument("--out", default=None, help="output trajectory CSV path")
    ps.add_argument("--outdir", default=None, help="output directory (or $DRSMOOTH_OUTDIR)")
    ps.set_defaults(func=_cmd_simulate)

    pm = sub.add_parser("smooth", formatter_class=fmt,
                        help="smooth observations with one method")
    pm.add_argument("--model-config", required=True, help="model JSON file")
    pm.add_argument("--observations", required=True, help="trajectory/observation CSV")
    pm.add_argument("--method", required=True,
                    choices=["ks", "drs-cd", "drs-admm", "huber", "ransac"])
    pm.add_argument("--lambda-x", type=float, default=0.05,
                    help="state outlier penalty")
    pm.add_argument("--lambda-y", type=float, default=0.01,
                    help="measurement outlier penalty")
    pm.add_argument("--kappa", type=float, default=0.002,
                    help="ADMM penalty parameter")
    pm.add_argument("--tol", type=float, default=1e-8,
                    help="convergence tolerance")
    pm.add_argument("--max-sweeps", type=int, default=500,
                    help="coordinate-descent sweep cap")
    pm.add_argument("--max-iters", type=int, default=8000,
                    help="ADMM iteration cap")
    pm.add_argument("--huber-threshold", type=float, default=1.345,
                    help="Huber threshold on whitened residuals")
    pm.add_argument("--draws", type=int, default=100,
                    help="RANSAC random draws")
    pm.add_argument("--inlier-threshold", type=float, default=1.345,
                    help="RANSAC inlier threshold on whitened residuals")
    pm.add_argument("--sample-states", action="store_true")
    pm.add_argument("--then-huber", action="store_true")
    pm.add_argument("--seed", type=int, default=0, help="seed for randomized methods")
    pm.add_argument("--out-prefix", default=None)
    pm.add_argument("--outdir", default=None)
    pm.set_defaults(func=_cmd_smooth)

    pl = sub.add_parser("select-lambda", formatter_class=fmt,
                        help="data-driven regularization selection")
    pl.add_argument("--model-config", required=True)
    pl.add_argument("--observations", required=True)
    pl.add_argument("--criterion", required=True, choices=["fraction", "avd"])
    pl.add_argument("--pi-x", type=float, default=0.0,
                    help="known state-outlier fraction (criterion=fraction)")
    pl.add_argument("--pi-y", type=float, default=0.0,
                    help="known measurement-outlier fraction (criterion=fraction)")
    pl.add_argument("--grid", default="10x10", help="IxxIy grid size")
    pl.add_argument("--floor-ratio", type=float, default=1e-3,
                    help="smallest grid point over the bound")
    pl.add_argument("--tol", type=float, default=1e-6,
                    help="per-point convergence tolerance")
    pl.add_argument("--max-sweeps", type=int, default=300,
                    help="per-point sweep cap")
    pl.add_argument("--out", default=None)
    pl.add_argument("--outdir", default=None)
    pl.set_defaults(func=_cmd_select_lambda)

    pt = sub.add_parser("stream", formatter_class=fmt,
                        help="online fixed-lag smoothing over a stream")
    pt.add_argument("--model-config", required=True)
    pt.add_argument("--observations", required=True,
                    help="observation CSV path or - for stdin rows")
    pt.add_argument("--method", default="drs-cd",
                    choices=["ks", "drs-cd", "drs-admm"])
    pt.add_argument("--lag", type=int, default=10,
                    help="estimation lag")
    pt.add_argument("--window", type=int, default=10,
                    help="anchored window length")
    pt.add_argument("--sweeps", type=int, default=50,
                    help="solver iterations per observation")
    pt.add_argument("--lambda-x", type=float, default=0.05,
                    help="state outlier penalty")
    pt.add_argument("--lambda-y", type=float, default=0.01,
                    help="measurement outlier penalty")
    pt.add_argument("--kappa", type=float, default=0.002,
                    help="ADMM penalty parameter")
    pt.add_argument("--out", default=None)
    pt.add_argument("--outdir", default=None)
    pt.set_defaults(func=_cmd_stream)

    pb = sub.add_parser("bench", formatter_class=fmt,
                        help="Monte-Carlo experiment from a descriptor")
    pb.add_argument("--experiment", required=True, help="experiment JSON file")
    pb.add_argument("--M", type=int, default=None, help="override replication count")
    pb.add_argument("--seed", type=int, default=None, help="override master seed")
    pb.add_argument("--outdir", default=None)
    pb.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ModelValidationError as exc:
        _fail(EXIT_VALIDATION, "validation", str(exc))
    except (ConfigError, KeyError) as exc:
        _fail(EXIT_CONFIG, "config", f"bad configuration: {exc}")
    except ValueError as exc:
        _fail(EXIT_VALIDATION, "validation", str(exc))
    except DrsmoothError as exc:
        _fail(EXIT_RUNTIME, "runtime", str(exc))


if __name__ == "__main__":
    sys.exit(main())
