"""Command-line interface: one executable, one subcommand per pipeline stage.

Files are the interface between stages: ``extract`` emits excursion
JSON-lines, ``fit`` emits fit JSON-lines, ``cohort`` emits the statistics
grid as CSV, ``report`` renders plot-ready tables and figures.  Every
output embeds the tool version, a schema tag, and the effective pipeline
configuration; paths and worker counts are deliberately excluded from the
echoed configuration so that re-running an identical pipeline reproduces
outputs byte for byte.

Exit codes: 0 success, 1 input error (bad flags, missing or malformed
files), 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import classify_stability, equilibrium, trapping_bound, trapping_bound_variable
from .cgm import (
    extract_excursions,
    ingest_csv,
    read_excursions_jsonl,
    smooth,
    write_excursions_jsonl,
)
from .fit import FitConfig, fit_excursions, fit_result_to_record
from .model import (
    InputPulse,
    ModelParams,
    ModelState,
    constant_external_input,
    simulate_integral,
    simulate_planar,
)
from .stats import build_cohort

SCHEMAS = {
    "trajectory": "glucopi-trajectory/1",
    "excursions": "glucopi-excursions/1",
    "fits": "glucopi-fits/1",
    "cohort": "glucopi-cohort/1",
}


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _fail(message: str) -> int:
    print(message, file=sys.stderr)
    return 1


def _config_comments(kind: str, config: dict) -> list[str]:
    return [
        f"schema={SCHEMAS[kind]}",
        f"version=glucopi {__version__}",
        "config=" + json.dumps(config, sort_keys=True),
    ]


def _meta_record(kind: str, config: dict) -> str:
    return json.dumps({
        "record": "meta",
        "schema": SCHEMAS[kind],
        "version": __version__,
        "config": config,
    }, sort_keys=True)


def _read_jsonl(path: str, expected_schema: str) -> tuple[dict, list[dict]]:
    meta: dict = {}
    records: list[dict] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("record") == "meta":
                meta = rec
                continue
            records.append(rec)
    if meta and meta.get("schema") != expected_schema:
        raise ValueError(
            f"{path}: schema {meta.get('schema')!r} does not match the "
            f"expected {expected_schema!r}")
    return meta, records


def _add_model_args(p: argparse.ArgumentParser) -> None:
    mid = ModelParams.table1_midpoint()
    p.add_argument("--a1", type=float, default=mid.a1,
                   help="proportional gain, litre/(min*mmol) (default: range midpoint)")
    p.add_argument("--a2", type=float, default=mid.a2,
                   help="integral gain, litre/(min*mmol) (default: range midpoint)")
    p.add_argument("--lambda", dest="lam", type=float, default=mid.lam,
                   help="inverse delay time scale, 1/min (default: range midpoint)")
    p.add_argument("--ebar", type=float, default=mid.e_bar,
                   help="set-point glucose, mmol/litre (default: range midpoint)")
    p.add_argument("--a3", type=float, default=mid.a3,
                   help="basal metabolic rate, mmol/(min*litre)")


def _params_from(args) -> ModelParams:
    return ModelParams(a1=args.a1, a2=args.a2, lam=args.lam,
                       e_bar=args.ebar, a3=args.a3)


def _write_json(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# --------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    params = _params_from(args)
    config = {
        "a1": params.a1, "a2": params.a2, "lam": params.lam,
        "e_bar": params.e_bar, "a3": params.a3,
        "g": args.g, "pulse_amplitude": args.pulse_amplitude,
        "pulse_center": args.pulse_center, "pulse_width": args.pulse_width,
        "e0": args.e0, "u0": args.u0, "t_end": args.t_end, "dt": args.dt,
        "formulation": args.formulation,
    }
    if args.pulse_amplitude is not None:
        ext = InputPulse(amplitude=args.pulse_amplitude,
                         center=args.pulse_center, width=args.pulse_width)
    else:
        ext = constant_external_input(params, args.g)
    if args.formulation == "planar":
        u0 = args.u0 if args.u0 is not None else params.a1 * args.e0
        traj = simulate_planar(params, ext, ModelState(u=u0, e=args.e0),
                               t_end=args.t_end, dt=args.dt)
    else:
        traj = simulate_integral(params, ext, initial_e=args.e0,
                                 t_end=args.t_end, dt=args.dt)
    comments = _config_comments("trajectory", config)
    if traj.escaped:
        comments.append("escaped=true (run truncated at total glucose zero)")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            traj.to_csv(fh, header_comments=comments)
    else:
        traj.to_csv(sys.stdout, header_comments=comments)
    return 0


def _cmd_equilibrium(args) -> int:
    params = _params_from(args)
    eq = equilibrium(params, args.g)
    _write_json({
        "schema": "glucopi-equilibrium/1",
        "version": __version__,
        "config": {"a1": params.a1, "a2": params.a2, "lam": params.lam,
                   "e_bar": params.e_bar, "a3": params.a3, "g": args.g},
        "e_star": eq.e_star,
        "u_star": eq.u_star,
        "g": eq.g,
        "branch": eq.branch,
        "residual": eq.residual,
        "glucose_star": eq.e_star + params.e_bar,
    }, args.out)
    return 0


def _cmd_stability(args) -> int:
    params = _params_from(args)
    rep = classify_stability(params, args.g)
    _write_json({
        "schema": "glucopi-stability/1",
        "version": __version__,
        "config": {"a1": params.a1, "a2": params.a2, "lam": params.lam,
                   "e_bar": params.e_bar, "a3": params.a3, "g": args.g},
        "equilibrium": {"e_star": rep.equilibrium.e_star,
                        "u_star": rep.equilibrium.u_star,
                        "branch": rep.equilibrium.branch},
        "trace": rep.trace,
        "determinant": rep.determinant,
        "classification": rep.classification,
    }, args.out)
    return 0


def _cmd_trap(args) -> int:
    params = _params_from(args)
    base_config = {"a1": params.a1, "a2": params.a2, "lam": params.lam,
                   "e_bar": params.e_bar, "a3": params.a3}
    if args.sweep:
        try:
            lo_s, hi_s, n_s = args.sweep.split(":")
            lo, hi, n = float(lo_s), float(hi_s), int(n_s)
        except ValueError:
            raise ValueError(f"--sweep expects g_min:g_max:n, got {args.sweep!r}")
        if n < 2 or hi <= lo:
            raise ValueError("--sweep needs g_max > g_min and n >= 2")
        lines = []
        for g in np.linspace(lo, hi, n):
            tb = trapping_bound(params, float(g))
            lines.append(f"{g:.10g},{tb.c:.10g},{tb.max_glucose:.10g}")
        comments = _config_comments("cohort", {**base_config, "sweep": args.sweep})
        comments[0] = "schema=glucopi-trap-sweep/1"
        text = "".join(f"# {c}\n" for c in comments) + "g,C,max_glucose\n" + "\n".join(lines) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    if args.g_min is not None or args.g_max is not None:
        if args.g_min is None or args.g_max is None:
            raise ValueError("--g-min and --g-max must be given together")
        tb = trapping_bound_variable(params, args.g_min, args.g_max)
        config = {**base_config, "g_min": args.g_min, "g_max": args.g_max}
    else:
        tb = trapping_bound(params, args.g)
        config = {**base_config, "g": args.g}
    _write_json({
        "schema": "glucopi-trap/1",
        "version": __version__,
        "config": config,
        "c": tb.c,
        "c_tight": tb.c_tight,
        "regime": tb.regime,
        "g_min": tb.g_min,
        "g_max": tb.g_max,
        "max_glucose": tb.max_glucose,
    }, args.out)
    return 0


def _pipeline_config(args, stage: str) -> dict:
    config = {
        "sigma": args.sigma,
        "min_deviation": args.min_dev,
        "unit": getattr(args, "unit", "mmol"),
        "interval_min": getattr(args, "interval_min", None),
    }
    if stage == "fit":
        config.update({
            "dt": args.dt,
            "learning_rate": args.learning_rate,
            "max_iterations": args.max_iterations,
            "grad_tol": args.grad_tol,
            "study": args.study_label,
        })
    return config


def _ingest_from_args(args):
    trace = ingest_csv(
        args.input,
        time_col=args.time_col,
        glucose_col=args.glucose_col,
        unit=args.unit,
        nominal_interval=args.interval_min,
        subject_id=args.subject_id,
    )
    smoothed = smooth(trace, args.sigma)
    return extract_excursions(smoothed, args.min_dev)


def _cmd_extract(args) -> int:
    excursions = _ingest_from_args(args)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write(_meta_record("excursions", _pipeline_config(args, "extract")) + "\n")
        n = write_excursions_jsonl(excursions, out)
    finally:
        if args.out:
            out.close()
    print(f"extracted {n} excursions "
          f"({sum(1 for x in excursions if x.kind == 'peak')} peaks)", file=sys.stderr)
    return 0


def _cmd_fit(args) -> int:
    if bool(args.input) == bool(args.excursions):
        raise ValueError("exactly one of --input or --excursions is required")
    if args.input:
        excursions = _ingest_from_args(args)
    else:
        with open(args.excursions) as fh:
            excursions = read_excursions_jsonl(fh)
    config = FitConfig(dt=args.dt, learning_rate=args.learning_rate,
                       max_iterations=args.max_iterations, grad_tol=args.grad_tol)
    t0 = time.perf_counter()
    results = fit_excursions(excursions, config, jobs=args.jobs)
    elapsed = time.perf_counter() - t0
    records = [fit_result_to_record(r, study=args.study_label) for r in results]
    with open(args.out, "w") as fh:
        fh.write(_meta_record("fits", _pipeline_config(args, "fit")) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if args.emit_curves:
        from .report import write_overlay_csv, _overlay_model

        curves_dir = Path(args.emit_curves)
        curves_dir.mkdir(parents=True, exist_ok=True)
        for i, rec in enumerate(records):
            model_at_obs, _, _ = _overlay_model(rec)
            write_overlay_csv(curves_dir / f"excursion_{i:04d}.csv",
                              np.asarray(rec["t"]), np.asarray(rec["observed_e"]),
                              model_at_obs)
    times = sorted(r.fit_seconds for r in results)
    if times:
        sub1 = sum(1 for s in times if s < 1.0)
        print(f"fitted {len(results)} excursions in {elapsed:.1f}s "
              f"({sub1}/{len(times)} under 1s, slowest {times[-1]:.2f}s)",
              file=sys.stderr)
    else:
        print("no excursions to fit", file=sys.stderr)
    return 0


def _load_fit_records(path: str) -> tuple[dict, list[dict]]:
    meta, records = _read_jsonl(path, SCHEMAS["fits"])
    if not records:
        raise ValueError(f"{path}: no fit records")
    return meta, records


def _cmd_cohort(args) -> int:
    from .fit import record_to_fit_result

    meta, records = _load_fit_records(args.fits)
    fits = [record_to_fit_result(rec) for rec in records]
    study_of = {rec["subject_id"]: rec.get("study", "unlabelled") for rec in records}
    cohort = build_cohort(fits, study_of, resamples=args.resamples, seed=args.seed)
    config = {"resamples": args.resamples, "seed": args.seed}
    comments = _config_comments("cohort", config)
    with open(args.out, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write("study,kind,parameter,mean,sd,count,cov,p_value\n")
        for row in cohort.rows:
            p = f"{row.p_value:.10g}" if row.p_value is not None else ""
            fh.write(f"{row.study},{row.kind},{row.parameter},{row.mean:.10g},"
                     f"{row.sd:.10g},{row.count},{row.cov:.10g},{p}\n")
    scatter_out = args.scatter_out or str(Path(args.out).with_name(
        Path(args.out).stem + "_scatter.csv"))
    with open(scatter_out, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write("subject,kind,a1_mean,a2_mean\n")
        for subject, kind, a1m, a2m in cohort.scatter_rows():
            fh.write(f"{subject},{kind},{a1m:.10g},{a2m:.10g}\n")
    print(f"cohort grid: {len(cohort.rows)} cells, "
          f"{len(cohort.subject_means)} subject/kind pairs", file=sys.stderr)
    return 0


def _read_cohort_meta(path: str) -> dict:
    config = {}
    with open(path) as fh:
        schema = None
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if body.startswith("schema="):
                schema = body.split("=", 1)[1]
            elif body.startswith("config="):
                config = json.loads(body.split("=", 1)[1])
    if schema != SCHEMAS["cohort"]:
        raise ValueError(f"{path}: schema {schema!r} does not match {SCHEMAS['cohort']!r}")
    return config


def _cmd_report(args) -> int:
    from .fit import record_to_fit_result
    from .report import generate_report

    meta, records = _load_fit_records(args.fits)
    cohort_config = _read_cohort_meta(args.cohort)
    fits = [record_to_fit_result(rec) for rec in records]
    study_of = {rec["subject_id"]: rec.get("study", "unlabelled") for rec in records}
    cohort = build_cohort(fits, study_of,
                          resamples=int(cohort_config.get("resamples", 10000)),
                          seed=int(cohort_config.get("seed", 0)))
    comments = _config_comments("cohort", cohort_config)
    manifest = generate_report(records, cohort, args.out_dir,
                               comments=comments, figures=not args.no_figures)
    print(f"report: {len(manifest['written'])} files in {args.out_dir}", file=sys.stderr)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glucopi",
                     description="Closed-loop glucose homeostasis model toolkit")
    parser.add_argument("--version", action="version", version=f"glucopi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate the model and emit a trajectory CSV",
                       parents=[], description="Simulate the closed loop.")
    _add_model_args(p)
    p.add_argument("--g", type=float, default=0.0,
                   help="constant net input -a3+F, mmol/(min*litre)")
    p.add_argument("--pulse-amplitude", type=float, default=None,
                   help="Gaussian input amplitude (overrides --g)")
    p.add_argument("--pulse-center", type=float, default=60.0)
    p.add_argument("--pulse-width", type=float, default=20.0)
    p.add_argument("--e0", type=float, default=0.0, help="initial deviation")
    p.add_argument("--u0", type=float, default=None,
                   help="initial control value (default a1*e0)")
    p.add_argument("--t-end", type=float, default=600.0)
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--formulation", choices=("planar", "integral"), default="planar")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("equilibrium", help="closed-form equilibrium for constant input")
    _add_model_args(p)
    p.add_argument("--g", type=float, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_equilibrium)

    p = sub.add_parser("stability", help="stability classification at the equilibrium")
    _add_model_args(p)
    p.add_argument("--g", type=float, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_stability)

    p = sub.add_parser("trap", help="trapping-region level and glucose ceiling")
    _add_model_args(p)
    p.add_argument("--g", type=float, default=0.0, help="constant net input")
    p.add_argument("--g-min", type=float, default=None,
                   help="lower bound of a variable input range")
    p.add_argument("--g-max", type=float, default=None,
                   help="upper bound of a variable input range (must be > 0)")
    p.add_argument("--sweep", default=None, metavar="GMIN:GMAX:N",
                   help="emit CSV g,C,max_glucose over a grid")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_trap)

    def add_ingest_args(p):
        p.add_argument("--time-col", default="time")
        p.add_argument("--glucose-col", default="glucose")
        p.add_argument("--unit", choices=("mmol", "mgdl"), default="mmol")
        p.add_argument("--interval-min", type=float, default=None,
                       help="nominal sampling interval (default: inferred)")
        p.add_argument("--subject-id", default=None)
        p.add_argument("--sigma", type=float, default=None,
                       help="smoothing width, minutes (default: one interval)")
        p.add_argument("--min-dev", type=float, default=0.5,
                       help="smallest |deviation| kept, mmol/litre")

    p = sub.add_parser("extract", help="smooth a CGM CSV and emit excursions JSONL")
    p.add_argument("--input", required=True)
    add_ingest_args(p)
    p.add_argument("--out", default=None, help="JSONL path (default stdout)")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("fit", help="conform model parameters to excursions")
    p.add_argument("--input", default=None, help="raw CGM CSV")
    p.add_argument("--excursions", default=None, help="extracted excursions JSONL")
    add_ingest_args(p)
    p.add_argument("--out", required=True, help="fits JSONL path")
    p.add_argument("--dt", type=float, default=None,
                   help="inner simulation step (default interval/5)")
    p.add_argument("--learning-rate", type=float, default=FitConfig.learning_rate)
    p.add_argument("--max-iterations", type=int, default=FitConfig.max_iterations)
    p.add_argument("--grad-tol", type=float, default=FitConfig.grad_tol)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--study-label", default="unlabelled")
    p.add_argument("--emit-curves", default=None, metavar="DIR",
                   help="write per-excursion overlay CSVs here")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("cohort", help="bootstrap cohort statistics from fits")
    p.add_argument("--fits", required=True)
    p.add_argument("--out", required=True, help="cohort grid CSV")
    p.add_argument("--scatter-out", default=None,
                   help="scatter CSV (default <out>_scatter.csv)")
    p.add_argument("--resamples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_cohort)

    p = sub.add_parser("report", help="render tables and figures from fits + cohort")
    p.add_argument("--fits", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true",
                   help="tables only, skip PNG rendering")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        return _fail(f"glucopi {args.command}: {exc}")
    except ArithmeticError as exc:
        print(f"glucopi {args.command}: internal invariant violated: {exc}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
