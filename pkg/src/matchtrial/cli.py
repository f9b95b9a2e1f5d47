"""Command line entry point: ``matchtrial simulate | plan | estimators``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import math
import os
import sys
import time
from dataclasses import replace
from importlib import metadata

from . import config as cfgmod
from . import design as dz
from .design import DesignParams
from .harness import (
    COLUMNS,
    ESTIMATOR_COLUMNS,
    FUTILITY_COLUMNS,
    FixedNNotFoundError,
    ScenarioError,
    default_threads,
    estimator_study,
    find_fixed_n,
    futility_table,
    run_scenario,
)

CSV_SCHEMA_VERSION = 1
DESCRIPTOR_COLUMNS = ("sigma", "n_C", "n1", "tau", "recalc_mode", "comparator")
SIMULATE_COLUMNS = ("name", *DESCRIPTOR_COLUMNS, *COLUMNS[1:], "n_fixed")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def fmt(v) -> str:
    """Full-precision text for a CSV cell (17 significant digits for floats)."""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    if v is None:
        return ""
    return str(v)


def write_csv(path: str, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matchtrial", description="Adaptive single-arm trials with matched historical controls")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--preset", help=f"named preset ({', '.join(sorted(cfgmod.PRESETS))})")
        sp.add_argument("--output-dir", default=".", help="directory for results.csv and manifest.yaml")
        sp.add_argument("--base-seed", type=int)
        sp.add_argument("--replications", type=int)
        sp.add_argument("--paper-scale", action="store_true", help=f"use {cfgmod.PAPER_REPLICATIONS} replications")
        sp.add_argument("--threads", type=int, default=None, help="worker processes (default: available CPUs)")

    sim = sub.add_parser("simulate", help="operating characteristics of one or more scenarios")
    run_flags(sim)
    sim.add_argument("--skip-fixed-n", action="store_true", help="do not run the fixed-design sample size search")

    est = sub.add_parser("estimators", help="bias, RMSE and CI coverage over a theta grid")
    run_flags(est)

    plan = sub.add_parser("plan", help="analytical futility probabilities and the cp lookup")
    plan.add_argument("--preset", choices=sorted(cfgmod.PLAN_PRESETS))
    plan.add_argument("--n1-eff", type=float, nargs="+")
    plan.add_argument("--M", type=float, nargs="+")
    plan.add_argument("--theta", type=float, nargs="+")
    plan.add_argument("--theta-stop", type=float)
    plan.add_argument("--pi-t", type=float, help="treatment rate (default: implied by each theta)")
    plan.add_argument("--pi-c", type=float)
    plan.add_argument("--n1", type=int, default=20, help="stage I size for the cp lookup")
    plan.add_argument("--M-max", type=int, default=10, help="largest M in the cp lookup")
    plan.add_argument("--output-dir", help="also write plan.csv, cp.csv and manifest.yaml here")
    return p


def _overrides(args) -> dict:
    o = {}
    if args.paper_scale:
        o["replications"] = cfgmod.PAPER_REPLICATIONS
    if args.replications is not None:
        o["replications"] = args.replications
    if args.base_seed is not None:
        o["base_seed"] = args.base_seed
    return o


def _load(args):
    if args.config is None and args.preset is None:
        raise UsageError("one of --config or --preset is required")
    doc = cfgmod.load_document(args.config, args.preset)
    scenarios = cfgmod.resolve(doc, _overrides(args))
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return doc, scenarios


def _prepare_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path!r} is not writable")


def _write_manifest(path: str, args, scenarios, outputs, started, extra=None) -> None:
    manifest = {
        "tool": "matchtrial",
        "version": _version(),
        "command": args.command,
        "config_path": getattr(args, "config", None),
        "preset": getattr(args, "preset", None),
        "base_seed": scenarios[0].base_seed if scenarios else None,
        "threads": getattr(args, "threads", None),
        "started_at": started.isoformat(timespec="seconds"),
        "wall_clock_seconds": None,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "outputs": outputs,
        "resolved": [s.to_dict() for s in scenarios],
    }
    if extra:
        manifest.update(extra)
    manifest["wall_clock_seconds"] = round(time.monotonic() - _T0, 3)
    with open(path, "w") as fh:
        fh.write(cfgmod.dump_yaml(manifest))


_T0 = time.monotonic()


def _fixed_n_for(scenario, spec: dict, threads: int, cache: dict):
    theta = float(spec.get("theta", cfgmod.THETA_PLAN))
    sigma = float(spec.get("sigma", scenario.model.sigma))
    d = scenario.design
    key = (scenario.n_C, sigma, theta, d.tau, d.M_max, d.caliper, d.alpha, d.analysis, scenario.replications, scenario.base_seed)
    if key not in cache:
        model = replace(scenario.model, theta=theta, sigma=sigma)
        try:
            res = find_fixed_n(model, d, float(spec.get("target_power", 1 - d.beta)), scenario.replications,
                               n_C=scenario.n_C, base_seed=scenario.base_seed,
                               n_ceiling=int(spec.get("n_ceiling", 200)), threads=threads)
            cache[key] = res.n
        except FixedNNotFoundError:
            cache[key] = None
    return cache[key]


def cmd_simulate(args) -> int:
    doc, scenarios = _load(args)
    _prepare_dir(args.output_dir)
    started = _dt.datetime.now()
    threads = args.threads or default_threads()
    spec = doc.get("fixed_n")
    cache: dict = {}
    rows = []
    for sc in scenarios:
        if sc.theta_grid is not None:
            raise UsageError(f"scenario {sc.name!r} has a theta grid; use the estimators command")
        agg = run_scenario(sc, threads).to_row()
        row = {
            "sigma": sc.model.sigma, "n_C": sc.n_C, "n1": sc.design.n1, "tau": sc.design.tau,
            "recalc_mode": sc.design.recalc_mode.value, "comparator": sc.comparator.kind, **agg,
        }
        if spec and not args.skip_fixed_n and sc.comparator.kind == "none":
            row["n_fixed"] = _fixed_n_for(sc, spec, threads, cache)
        rows.append(row)
        print(f"{sc.name}: reject={agg['reject_rate']:.4f} stop={agg['stop_rate']:.4f} "
              f"E[n]={agg['expected_total_n']:.2f}", file=sys.stderr)
    out_csv = os.path.join(args.output_dir, "results.csv")
    write_csv(out_csv, SIMULATE_COLUMNS, rows)
    _write_manifest(os.path.join(args.output_dir, "manifest.yaml"), args, scenarios, {"results": out_csv}, started,
                    {"columns": list(SIMULATE_COLUMNS), "fixed_n": spec if not args.skip_fixed_n else None})
    return EXIT_OK


def cmd_estimators(args) -> int:
    doc, scenarios = _load(args)
    _prepare_dir(args.output_dir)
    started = _dt.datetime.now()
    threads = args.threads or default_threads()
    rows = []
    columns = ("name", *ESTIMATOR_COLUMNS)
    for sc in scenarios:
        if not sc.theta_grid:
            raise UsageError(f"scenario {sc.name!r}: theta_grid must be non-empty")
        for r in estimator_study(sc, threads):
            rows.append({"name": sc.name, **r})
    out_csv = os.path.join(args.output_dir, "results.csv")
    write_csv(out_csv, columns, rows)
    _write_manifest(os.path.join(args.output_dir, "manifest.yaml"), args, scenarios, {"results": out_csv}, started,
                    {"columns": list(columns)})
    return EXIT_OK


def cmd_plan(args) -> int:
    base = dict(cfgmod.PLAN_PRESETS[args.preset]) if args.preset else {}
    grid = {
        "n1_eff": args.n1_eff or base.get("n1_eff"),
        "M": args.M or base.get("M"),
        "theta": args.theta or base.get("theta"),
        "theta_stop": args.theta_stop if args.theta_stop is not None else base.get("theta_stop", math.log(1.3)),
        "pi_c": args.pi_c if args.pi_c is not None else base.get("pi_c", 0.3),
        "pi_t": args.pi_t,
    }
    for key in ("n1_eff", "M", "theta"):
        if not grid[key]:
            raise UsageError(f"--{key.replace('_', '-')} needs at least one value")
    if any(v <= 0 for v in grid["n1_eff"]) or any(v <= 0 for v in grid["M"]):
        raise UsageError("--n1-eff and --M values must be positive")
    for key in ("pi_c", "pi_t"):
        if grid[key] is not None and not 0.0 < grid[key] < 1.0:
            raise UsageError(f"--{key.replace('_', '-')} must lie in (0, 1)")
    rows = futility_table(grid["n1_eff"], grid["M"], grid["theta_stop"], grid["theta"], grid["pi_t"], grid["pi_c"])
    try:
        params = DesignParams(n1=args.n1, M_max=args.M_max, theta_stop=grid["theta_stop"], pi_c_plan=grid["pi_c"])
    except dz.DesignValidationError as exc:
        raise UsageError(str(exc)) from None
    cp_rows = [{"M": M, "cp": cp} for M, cp in dz.cp_table(params).items()]

    out = sys.stdout
    w = csv.writer(out, lineterminator="\n")
    w.writerow(FUTILITY_COLUMNS)
    for r in rows:
        w.writerow([fmt(r[c]) for c in FUTILITY_COLUMNS])
    out.write("\n")
    w.writerow(("M", "cp"))
    for r in cp_rows:
        w.writerow([fmt(r["M"]), fmt(r["cp"])])
    if args.output_dir:
        _prepare_dir(args.output_dir)
        plan_csv = os.path.join(args.output_dir, "plan.csv")
        cp_csv = os.path.join(args.output_dir, "cp.csv")
        write_csv(plan_csv, FUTILITY_COLUMNS, rows)
        write_csv(cp_csv, ("M", "cp"), cp_rows)
        _write_manifest(os.path.join(args.output_dir, "manifest.yaml"), args, [], {"plan": plan_csv, "cp": cp_csv},
                        _dt.datetime.now(), {"grid": grid, "cp_design": params.to_dict()})
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimators": cmd_estimators, "plan": cmd_plan}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except (cfgmod.ConfigError, ScenarioError, dz.DesignValidationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
