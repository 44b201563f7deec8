"""Command-line interface.

Subcommands:
    simulate     run a Monte-Carlo design, write data and metrics CSVs
    fit-stream   absorb one batch into a persisted stream state
    fit-offline  dense fit on a full long-format dataset (size-guarded)
    compare      AR(1)-basis vs working-independence interval lengths

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .engine import SolverConfig, StreamSession, default_q_candidates
from .exceptions import NumericalError, ValidationError
from .families import FAMILIES
from .inference import FitReport, confidence_intervals, wald_tests
from .io import (append_report_csv, ingest_batch, ingest_long, load_session,
                 save_session, state_lock, write_compare_csv, write_long_csv,
                 write_metrics_csv)
from .offline import offline_fit
from .simulate import (SimDesign, beta_profile, compare_efficiency, generate,
                       run_replicates)


def _design_from_file(path, replicates=None):
    try:
        with open(path, encoding="utf-8") as fh:
            spec = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"design file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"design file is not valid JSON: {path}") from exc
    try:
        terms = []
        for entry in spec["beta"]:
            if len(entry) != 1:
                raise ValidationError(
                    "each beta entry must have exactly one of const/sine/parabola"
                )
            ((kind, value),) = entry.items()
            terms.append((kind, value))
        q_grid = spec.get("q_grid")
        if isinstance(q_grid, dict):
            q_grid = default_q_candidates(
                spec["b"], a_min=q_grid.get("a_min", 0.1),
                a_max=q_grid.get("a_max", 1.0), count=q_grid.get("count", 20),
            )
        elif q_grid is not None:
            q_grid = tuple(float(v) for v in q_grid)
        return SimDesign(
            family=spec["family"], m=int(spec["m"]), b=int(spec["b"]),
            n_j=int(spec["n_j"]), beta_fn=beta_profile(terms), p=len(terms),
            sigma2=float(spec.get("sigma2", 4.0)),
            rho=float(spec.get("rho", 0.8)),
            seed=int(spec.get("seed", 0)),
            replicates=int(replicates if replicates is not None
                           else spec.get("replicates", 100)),
            q=spec.get("q"), q_grid=q_grid,
            labels=tuple(spec["labels"]) if "labels" in spec else (),
        )
    except KeyError as exc:
        raise ValidationError(f"design file missing field {exc}") from None


def _print_report(report):
    print(f"batch {report.batch_index} at t={report.t_b:g} "
          f"(q={report.q_used:g}, {report.n_iterations} iterations)")
    print(f"{'coefficient':<12} {'estimate':>12} {'std_err':>12} "
          f"{'ci_lower':>12} {'ci_upper':>12} {'p_value':>10}")
    for row in report.rows():
        print(f"{row['coefficient']:<12} {row['estimate']:>12.6f} "
              f"{row['std_err']:>12.6f} {row['ci_lower']:>12.6f} "
              f"{row['ci_upper']:>12.6f} {row['p_value']:>10.4g}")


def _cmd_simulate(args):
    design = _design_from_file(args.design, replicates=args.replicates)
    os.makedirs(args.out, exist_ok=True)
    results = run_replicates(design)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), results.metrics())
    data = generate(design, 0)
    write_long_csv(os.path.join(args.out, "data_rep0.csv"),
                   data.to_cumulative())
    if results.n_failed:
        print(f"excluded {results.n_failed} failed replicates", file=sys.stderr)
    for row in results.metrics():
        print(f"{row.coefficient:<12} rmse={row.rmse:.4g} ese={row.ese:.4g} "
              f"bias={row.bias:+.4g} cp={row.cp:.3f} len={row.len:.4g}")
    return 0


def _solver_config(args):
    return SolverConfig(tol=args.tol, max_iter=args.max_iter,
                        check_information=args.check_information)


def _ingest_with_time(args, family):
    batches, t_csv, _ = ingest_batch(args.batch, family)
    if args.t is not None and args.t != t_csv:
        raise ValidationError(
            f"--t {args.t} does not match the batch file time {t_csv}"
        )
    return batches, t_csv


def _cmd_fit_stream(args):
    report_path = args.report or f"{args.state}.report.csv"
    with state_lock(args.state):
        if args.init:
            if os.path.exists(args.state) and not args.force:
                raise ValidationError(
                    f"state file {args.state} already exists (use --force)"
                )
            if (args.q is None) == (args.q_grid is None):
                raise ValidationError(
                    "--init requires exactly one of --q or --q-grid"
                )
            family = args.family or "gaussian"
            batches, t = _ingest_with_time(args, family)
            candidates = None
            if args.q_grid is not None:
                a_min, a_max, count = args.q_grid
                candidates = default_q_candidates(args.horizon, a_min=a_min,
                                                  a_max=a_max, count=int(count))
            session = StreamSession(family, s_count=_s_count(args.working),
                                    q=args.q, candidates=candidates,
                                    config=_solver_config(args))
            session.start(batches, t)
        else:
            session = load_session(args.state)
            if args.family is not None and session.family != args.family:
                raise ValidationError(
                    f"state/model mismatch: state family {session.family!r}, "
                    f"requested {args.family!r}"
                )
            if args.q is not None and session.q != args.q:
                raise ValidationError(
                    "state/model mismatch: state was initialized with "
                    f"q={session.q}, requested q={args.q}"
                )
            batches, t = _ingest_with_time(args, session.family)
            session.step(batches, t)
        save_session(session, args.state)
        report = session.report(level=args.level)
        append_report_csv(report_path, report)
    _print_report(report)
    return 0


def _cmd_fit_offline(args):
    data = ingest_long(args.data, args.family)
    fit = offline_fit(data, q=args.q, family=args.family,
                      s_count=_s_count(args.working),
                      config=_solver_config(args))
    se, lo, hi = confidence_intervals(fit.beta, fit.cov, args.level)
    z, p = wald_tests(fit.beta, se)
    report = FitReport(
        beta=fit.beta, cov=fit.cov, std_err=se, ci_lower=lo, ci_upper=hi,
        wald_z=z, p_values=p, q_used=args.q, t_b=float(data.times[-1]),
        n_iterations=fit.n_iter, batch_index=len(data.times),
        level=args.level, labels=tuple(f"x{k + 1}" for k in range(data.p)),
    )
    if args.out:
        append_report_csv(args.out, report)
    _print_report(report)
    return 0


def _cmd_compare(args):
    design = _design_from_file(args.design, replicates=args.replicates)
    rows, _, _ = compare_efficiency(design)
    if args.out:
        write_compare_csv(args.out, rows)
    print(f"{'coefficient':<12} {'len_ar1':>12} {'len_indep':>12} {'ratio':>8}")
    for row in rows:
        print(f"{row['coefficient']:<12} {row['len_ar1']:>12.5f} "
              f"{row['len_independence']:>12.5f} {row['ratio']:>8.3f}")
    return 0


def _s_count(working):
    if working not in ("ar1", "independence"):
        raise ValidationError("--working must be 'ar1' or 'independence'")
    return 2 if working == "ar1" else 1


def _q_grid(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--q-grid expects a_min,a_max,count")
    return float(parts[0]), float(parts[1]), int(parts[2])


def build_parser():
    parser = argparse.ArgumentParser(
        prog="streamqif",
        description="Streaming quadratic inference function estimation "
                    "for longitudinal data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte-Carlo design")
    sim.add_argument("--design", required=True, help="design JSON file")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--replicates", type=int, default=None,
                     help="override the design's replicate count")
    sim.set_defaults(func=_cmd_simulate)

    def add_solver_flags(p):
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--max-iter", type=int, default=100)
        p.add_argument("--level", type=float, default=0.95,
                       help="confidence level")
        p.add_argument("--check-information", action="store_true",
                       help="warn when the cross-batch information matrix "
                            "is not positive definite")

    fs = sub.add_parser("fit-stream", help="absorb one batch into a stream")
    fs.add_argument("--state", required=True, help="state JSON file")
    fs.add_argument("--batch", required=True, help="single-batch CSV")
    fs.add_argument("--t", type=float, default=None,
                    help="batch time (must match the CSV when given)")
    fs.add_argument("--init", action="store_true",
                    help="start a new stream from this batch")
    fs.add_argument("--force", action="store_true",
                    help="allow --init to overwrite an existing state file")
    fs.add_argument("--family", choices=FAMILIES, default=None,
                    help="outcome family (defaults to the state's family "
                         "when continuing a stream, gaussian at --init)")
    fs.add_argument("--working", choices=("ar1", "independence"),
                    default="ar1")
    fs.add_argument("--q", type=float, default=None,
                    help="fixed decay parameter in (0, 1)")
    fs.add_argument("--q-grid", type=_q_grid, default=None,
                    metavar="A_MIN,A_MAX,COUNT",
                    help="adaptive decay grid q = exp(-a * horizon^0.3)")
    fs.add_argument("--horizon", type=int, default=200,
                    help="planned number of batches used to map --q-grid "
                         "onto decay candidates")
    fs.add_argument("--report", default=None,
                    help="report CSV path (default: <state>.report.csv)")
    add_solver_flags(fs)
    fs.set_defaults(func=_cmd_fit_stream)

    fo = sub.add_parser("fit-offline", help="dense fit on cumulative data")
    fo.add_argument("--data", required=True, help="multi-batch long CSV")
    fo.add_argument("--q", type=float, required=True)
    fo.add_argument("--family", choices=FAMILIES, default="gaussian")
    fo.add_argument("--working", choices=("ar1", "independence"),
                    default="ar1")
    fo.add_argument("--out", default=None, help="report CSV path")
    add_solver_flags(fo)
    fo.set_defaults(func=_cmd_fit_offline)

    cp = sub.add_parser("compare",
                        help="AR(1) basis vs independence interval lengths")
    cp.add_argument("--design", required=True, help="design JSON file")
    cp.add_argument("--out", default=None, help="comparison CSV path")
    cp.add_argument("--replicates", type=int, default=None)
    cp.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
