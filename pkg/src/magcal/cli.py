"""Command-line front end: ``simulate``, ``calibrate`` and ``apply``.

Exit codes: 0 success, 1 data or I/O error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import CalibrationError, InsufficientDataError
from .files import (
    CalibrationFile,
    Provenance,
    fmt,
    read_calibration,
    read_log,
    write_calibration,
    write_table,
)
from .init_estimate import DEFAULT_RESTARTS
from .preprocess import DEFAULT_TOL, DEFAULT_WINDOW, group_by_set_id, segment_by_norm
from .refine import VARIANTS, ConvergenceConfig, calibrate, get_variant
from .sensor_model import invert_reading
from .simulator import MonteCarloConfig, default_threads, run_monte_carlo

logger = logging.getLogger("magcal")

MIN_SETS = 9
QUANTILES = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)

REPORT_HEADER = [
    "seed", "run", "variant", "n_sets", "gamma",
    "delta_a", "delta_m", "test_delta_a", "test_delta_m",
    "iterations", "switch_iteration", "final_cost", "failed", "error",
]  # fmt: skip


class UsageError(Exception):
    pass


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None


def parse_sweep(spec):
    """``gamma=1e1,1e-1`` or ``sets=10,20,30`` -> (kind, values)."""
    kind, sep, values = spec.partition("=")
    kind = kind.strip()
    if not sep or kind not in ("gamma", "sets"):
        raise UsageError(f"--sweep must look like gamma=v1,v2 or sets=n1,n2; got {spec!r}")
    vals = _float_list(values)
    if not vals:
        raise UsageError("--sweep needs at least one value")
    if kind == "sets":
        if any(v != int(v) or v < 1 for v in vals):
            raise UsageError("set counts must be positive integers")
        vals = [int(v) for v in vals]
    elif any(not v > 0 for v in vals):
        raise UsageError("gamma values must be positive")
    return kind, tuple(vals)


def _variants(text):
    names = [v.strip().lower() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in VARIANTS]
    if bad or not names:
        raise UsageError(f"unknown variant(s) {bad}; choose from {sorted(VARIANTS)}")
    return tuple(names)


def _quantile_rows(reports):
    groups = {}
    for r in reports:
        groups.setdefault((r.variant, r.n_sets, r.gamma), []).append(r)
    rows = []
    for (variant, n, gamma), reps in groups.items():
        ok = [r for r in reps if not r.failed]
        for metric in ("delta_a", "delta_m", "test_delta_a", "test_delta_m"):
            vals = np.array([getattr(r, metric) for r in ok], dtype=float)
            vals = vals[np.isfinite(vals)]
            if len(vals):
                qs = [float(np.quantile(vals, q)) for q in QUANTILES]
                frac = float(np.mean(vals < 0.1))
                mean = float(np.mean(vals))
            else:
                qs, frac, mean = [float("nan")] * len(QUANTILES), float("nan"), float("nan")
            rows.append([variant, n, gamma, metric, len(reps), len(reps) - len(ok), mean, frac] + qs)
    return rows


def cmd_simulate(args):
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    sweep, sweep_values = (None, ())
    if args.sweep:
        sweep, sweep_values = parse_sweep(args.sweep)
        if sweep == "gamma" and args.gamma is not None:
            raise UsageError("--gamma conflicts with --sweep gamma=...")
        if sweep == "sets" and args.sets is not None:
            raise UsageError("--sets conflicts with --sweep sets=...")
    n_sets = args.sets if args.sets is not None else 15
    gamma = args.gamma if args.gamma is not None else 1e-4
    if n_sets < MIN_SETS or (sweep == "sets" and min(sweep_values) < MIN_SETS):
        raise UsageError(f"at least {MIN_SETS} sets are needed for the ellipsoid fit")
    if not gamma > 0:
        raise UsageError("--gamma must be positive")
    cfg = MonteCarloConfig(
        runs=args.runs,
        n_sets=n_sets,
        gamma=gamma,
        variants=_variants(args.variants),
        seed=args.seed,
        test_split=not args.no_test,
        sweep=sweep,
        sweep_values=sweep_values,
        restarts=args.restarts,
        max_outer_iters=args.max_iters,
        threads=args.threads or default_threads(),
    )
    reports = run_monte_carlo(cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(
        out / "report.csv",
        REPORT_HEADER,
        [
            [
                cfg.seed, r.run, r.variant, r.n_sets, r.gamma,
                r.delta_a, r.delta_m, r.test_delta_a, r.test_delta_m,
                r.iterations, "" if r.switch_iteration is None else r.switch_iteration,
                r.final_cost, int(r.failed), r.error,
            ]  # fmt: skip
            for r in reports
        ],
    )
    write_table(
        out / "summary.csv",
        ["variant", "n_sets", "gamma", "metric", "runs", "failed", "mean", "frac_below_0.1"]
        + [f"q{int(q * 100)}" for q in QUANTILES],
        _quantile_rows(reports),
    )
    # wall times vary between invocations, so they live apart from the report
    write_table(
        out / "timings.csv",
        ["run", "variant", "n_sets", "gamma", "time_s"],
        [[r.run, r.variant, r.n_sets, r.gamma, r.time_s] for r in reports],
    )
    n_fail = sum(r.failed for r in reports)
    print(f"{len(reports)} rows ({n_fail} failed) written to {out}")
    return 0


def _set_residuals(state, data):
    """Per-sample and per-set residual rows for both sensors."""
    sample_rows, set_rows = [], []
    for key, name, sets in (("a", "accelerometer", data.accel), ("m", "magnetometer", data.mag)):
        mu = state.predicted_means(key)
        Sigma = state.sensor(key).Sigma
        Sinv = np.linalg.inv(Sigma)
        for i, v in enumerate(sets):
            idx = data.indices[i] if data.indices is not None else np.arange(len(v))
            for j, s in zip(idx, v):
                sample_rows.append([int(j), i, name, *map(float, s), *map(float, mu[i])])
            r = v.mean(axis=0) - mu[i]
            d = float(np.sqrt(r @ Sinv @ r))
            set_rows.append([i, name, len(v), *map(float, r), d, int(d > 3.0)])
    return sample_rows, set_rows


def cmd_calibrate(args):
    if not args.gamma > 0:
        raise UsageError("--gamma must be positive")
    if args.window < 2 or not args.tol > 0:
        raise UsageError("--window must be >= 2 and --tol positive")
    log = read_log(args.input)
    if log.set_ids is not None:
        data = group_by_set_id(log.accel, log.mag, log.set_ids)
    else:
        data = segment_by_norm(log.accel, log.mag, window=args.window, tol=args.tol)
    if data.n_sets < MIN_SETS:
        raise InsufficientDataError(
            f"only {data.n_sets} quasi-static sets found, at least {MIN_SETS} distinct orientations are needed; "
            "hold the device still in more orientations, or loosen --tol / shorten --window"
        )
    logger.info("%d sets from %d samples", data.n_sets, len(log))
    rng = np.random.default_rng(args.seed)
    state, diag = calibrate(
        data,
        args.variant,
        ConvergenceConfig(gamma=args.gamma, max_outer_iters=args.max_iters),
        rng=rng,
        restarts=args.restarts,
    )
    prov = Provenance(log.digest, args.seed, get_variant(args.variant).name, args.gamma, diag.iterations, diag.final_cost)
    out = Path(args.out)
    write_calibration(out, CalibrationFile(state, prov))

    samples, sets = _set_residuals(state, data)
    res_path = Path(args.residuals) if args.residuals else out.with_name(out.stem + "_residuals.csv")
    write_table(
        res_path,
        ["sample", "set", "sensor", "x", "y", "z", "mean_x", "mean_y", "mean_z"],
        samples,
    )
    write_table(
        res_path.with_name(res_path.stem + "_sets.csv"),
        ["set", "sensor", "count", "rx", "ry", "rz", "mahalanobis", "flagged"],
        sets,
    )
    flagged = sorted({r[0] for r in sets if r[-1]})
    print(
        f"{data.n_sets} sets, {diag.iterations} iterations, cost {fmt(diag.final_cost)}; "
        f"sets above 3 sigma: {flagged if flagged else 'none'}"
    )
    return 0


def cmd_apply(args):
    cal = read_calibration(args.calibration)
    log = read_log(args.input)
    a = invert_reading(cal.state.accel, log.accel)
    m = invert_reading(cal.state.mag, log.mag)
    header = ["timestamp", "ax", "ay", "az", "mx", "my", "mz"]
    if log.set_ids is not None:
        header.append("set_id")
    rows = []
    for k, t in enumerate(log.timestamps):
        row = [t, *map(float, a[k]), *map(float, m[k])]
        if log.set_ids is not None:
            row.append(int(log.set_ids[k]))
        rows.append(row)
    write_table(args.out, header, rows)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="magcal", description="Joint accelerometer and magnetometer calibration.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a Monte Carlo campaign on synthetic sensors")
    s.add_argument("--runs", type=int, default=100)
    s.add_argument("--sets", type=int, default=None, help="orientations per run (default 15)")
    s.add_argument("--gamma", type=float, default=None, help="stopping threshold (default 1e-4)")
    s.add_argument("--variants", default="ncar", help="comma list of ncdr,ncar,fcar,dcar")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sweep", default=None, help="gamma=v1,v2,... or sets=n1,n2,...")
    s.add_argument("--restarts", type=int, default=DEFAULT_RESTARTS)
    s.add_argument("--max-iters", type=int, default=500)
    s.add_argument("--no-test", action="store_true", help="skip the held-out test sets")
    s.add_argument("--threads", type=int, default=None, help="worker processes (default: MAGCAL_THREADS or all cores)")
    s.add_argument("--out", default="magcal_sim")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="calibrate from a CSV sensor log")
    c.add_argument("input")
    c.add_argument("--variant", default="ncar", choices=sorted(VARIANTS))
    c.add_argument("--gamma", type=float, default=1e-4)
    c.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    c.add_argument("--tol", type=float, default=DEFAULT_TOL)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--restarts", type=int, default=DEFAULT_RESTARTS)
    c.add_argument("--max-iters", type=int, default=500)
    c.add_argument("--out", default="calibration.json")
    c.add_argument("--residuals", default=None, help="per-sample residual table (default: next to --out)")
    c.set_defaults(func=cmd_calibrate)

    a = sub.add_parser("apply", help="map raw readings to nominal field estimates")
    a.add_argument("calibration")
    a.add_argument("input")
    a.add_argument("--out", default="corrected.csv")
    a.set_defaults(func=cmd_apply)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.print_usage(sys.stderr)
        print("magcal: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"magcal: error: {exc}", file=sys.stderr)
        return 2
    except (CalibrationError, OSError) as exc:
        print(f"magcal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
