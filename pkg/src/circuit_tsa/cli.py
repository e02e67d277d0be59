"""Command-line front end: ``circuit-tsa {powerflow,run,netlist,compare}``.

Exit codes: 0 success, 1 usage or schema error, 2 convergence failure,
3 comparison outside the given tolerances.
"""

from __future__ import annotations

import argparse
import cmath
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from .case import Case, CaseError, load_case, load_shipped_case
from .engine import ConvergenceError, SimulationError, SolverConfig
from .grid import PowerFlowError, solve_power_flow
from .netlist import export_spice_netlist
from .oracle import ComparisonError, compare_series
from .scenario import ScenarioError, compile_case, place_faults, run_scenario
from .timeseries import read_csv, write_csv

EXIT_OK, EXIT_USAGE, EXIT_CONVERGENCE, EXIT_MISMATCH = 0, 1, 2, 3

log = logging.getLogger("circuit_tsa")


class UsageError(Exception):
    pass


def _load(args) -> Case:
    return load_case(args.case) if args.case else load_shipped_case()


def _seed(args, case: Case) -> dict[int, complex] | None:
    """``flat`` drops stored seeds; a JSON file maps bus id to ``[|V|, angle_deg]``."""
    spec = getattr(args, "seed_voltages", None)
    if spec is None:
        return None
    if spec == "flat":
        return {b.id: 1.0 + 0j for b in case.buses}
    try:
        raw = json.loads(Path(spec).read_text())
        return {int(k): cmath.rect(float(v[0]), math.radians(float(v[1]))) for k, v in raw.items()}
    except (OSError, ValueError, TypeError, IndexError) as err:
        raise UsageError(f"--seed-voltages: cannot read {spec}: {err}") from err


def _probes(args):
    if not args.probe:
        return None
    return [p for item in args.probe for p in item.split(",") if p]


def cmd_powerflow(args) -> int:
    case = _load(args)
    if args.seed_voltages == "flat":
        case = case.copy(buses=[replace(b, v_seed=None) for b in case.buses])
    pf = solve_power_flow(case, seed=_seed(args, case))
    rows = []
    print(f"{'bus':>4s} {'|V|':>10s} {'angle_deg':>11s} {'P_gen':>10s} {'Q_gen':>10s}")
    for b, v, s in zip(pf.bus_ids, pf.voltages, pf.generation):
        mag, ang = abs(v), math.degrees(cmath.phase(v))
        print(f"{b:4d} {mag:10.6f} {ang:11.5f} {s.real:10.5f} {s.imag:10.5f}")
        rows.append({"bus": b, "vm": mag, "va_deg": ang, "p_gen": s.real, "q_gen": s.imag})
    print(f"converged in {pf.iterations} iterations, max mismatch {pf.max_mismatch:.3e}")
    if args.out:
        Path(args.out).write_text(json.dumps({"iterations": pf.iterations, "max_mismatch": pf.max_mismatch,
                                              "buses": rows}, indent=2) + "\n")
    return EXIT_OK


def cmd_run(args) -> int:
    case = _load(args)
    t_stop = args.tstop if args.tstop is not None else case.t_stop
    config = SolverConfig(dt=args.dt, t_stop=t_stop, integration_method=args.method)
    compiled = None
    seed = _seed(args, case)
    if seed is not None:
        split = place_faults(case)
        compiled = compile_case(split, solve_power_flow(split, seed=seed))
    series = run_scenario(case, config, probes=_probes(args), compiled=compiled)
    out = args.out or "run.csv"
    write_csv(series, out)
    print(f"wrote {len(series.time)} samples x {len(series.names)} channels to {out} "
          f"in {series.meta.get('runtime_s', float('nan')):.2f} s")
    return EXIT_OK


def cmd_netlist(args) -> int:
    compiled = compile_case(_load(args))
    text = export_spice_netlist(compiled.netlist)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_tolerances(items):
    if not items:
        return None
    tol = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--tol expects NAME=VALUE, got {item!r}")
        try:
            tol[key] = float(val)
        except ValueError as err:
            raise UsageError(f"--tol {item!r}: {err}") from err
    return tol


def cmd_compare(args) -> int:
    try:
        a, b = read_csv(args.a), read_csv(args.b)
    except (OSError, ValueError) as err:
        raise UsageError(str(err)) from err
    report = compare_series(a, b, _parse_tolerances(args.tol), channels=_probes(args))
    print(report.format())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_MISMATCH


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="circuit-tsa", description="Circuit-based transient stability analysis.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_case(sp):
        sp.add_argument("--case", help="case JSON file (default: the shipped modified IEEE 14-bus case)")

    pf = sub.add_parser("powerflow", help="solve and print the power flow")
    with_case(pf)
    pf.add_argument("--seed-voltages", help="'flat' or a JSON file {bus: [|V|, angle_deg]}")
    pf.add_argument("--out", help="write the solution as JSON")

    run = sub.add_parser("run", help="run the scenario and write a CSV")
    with_case(run)
    run.add_argument("--tstop", type=float, help="end time in seconds (default: from the case)")
    run.add_argument("--dt", type=float, default=1e-3, help="time step in seconds (default 1e-3)")
    run.add_argument("--method", choices=("trapezoidal", "backward_euler"), default="trapezoidal")
    run.add_argument("--probe", action="append", help="channel name(s), comma separated; repeatable")
    run.add_argument("--seed-voltages", help="'flat' or a JSON file {bus: [|V|, angle_deg]}")
    run.add_argument("--out", help="CSV path (default run.csv)")

    nl = sub.add_parser("netlist", help="export the compiled case as a SPICE-style deck")
    with_case(nl)
    nl.add_argument("--out", help="output path (default: stdout)")

    cmp_ = sub.add_parser("compare", help="per-channel max and RMS deviation of two CSVs")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--probe", action="append", help="restrict to these channels")
    cmp_.add_argument("--tol", action="append", help="NAME=VALUE; NAME is a channel or a kind such as omega")
    cmp_.add_argument("--out", help="write the report as JSON")
    return p


COMMANDS = {"powerflow": cmd_powerflow, "run": cmd_run, "netlist": cmd_netlist, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, CaseError, ComparisonError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as err:
        print(f"error: {err}", file=sys.stderr)
        numeric = err.stage in ("initial-solve", "transient", "equilibrium-check")
        return EXIT_CONVERGENCE if numeric or isinstance(err.__cause__, PowerFlowError) else EXIT_USAGE
    except (PowerFlowError, ConvergenceError, SimulationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
