"""Command line entry point: ``uavnet {solve|sweep|validate}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bandwidth import BandwidthPlan, InfeasibleError, SolverFailure, backhaul_rates
from .bca import Mode, SweepParameter, run_mode, sweep, verify_solution
from .link import Trajectory, propulsion_plus_comm_power, uav_speed_profile
from .scenario import ScenarioError, load_scenario, scenario_from_dict, scenario_to_dict

log = logging.getLogger("uavnet")

EXIT_OK, EXIT_IO, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_MISMATCH = 0, 1, 2, 3, 4
ARTIFACTS = ("trajectory.csv", "rates.csv", "allocation.csv", "convergence.csv", "verify.txt", "manifest.json")


class UsageError(Exception):
    pass


def fmt(x) -> str:
    x = float(x)
    if np.isnan(x):
        return "nan"
    return f"{x:.17g}"


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else (str(c) if isinstance(c, (int, np.integer)) else fmt(c)) for c in row])
    return buf.getvalue()


def read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ScenarioError(f"{path}: empty file")
    return rows[0], rows[1:]


def load_input(path, seed=None):
    """A scenario file, or a manifest written by ``solve`` (its embedded scenario is used)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict) and "resolved_scenario" in doc:
        return scenario_from_dict(doc["resolved_scenario"])
    return scenario_from_dict(doc, seed=seed) if seed is not None else load_scenario(path)


# -- solve ------------------------------------------------------------------------------

def solution_tables(scenario, sol):
    traj = sol.trajectory
    J, V = scenario.slot_count, scenario.vehicle_count
    speed = np.concatenate([[0.0], uav_speed_profile(traj.xy, scenario.slot_length)])
    power = propulsion_plus_comm_power(speed, scenario.power_model, scenario.total_comm_power)
    trajectory = csv_text(["slot", "x_m", "y_m", "speed_mps", "power_W"],
                          [[j, traj.xy[j, 0], traj.xy[j, 1], speed[j], power[j]] for j in range(J + 1)])
    rates = sol.per_slot_rates
    cap = backhaul_rates(scenario, traj)
    load = rates.sum(axis=0)
    rates_csv = csv_text(["slot"] + [f"rate_v{v}_bps" for v in range(V)] + ["backhaul_capacity_bps", "backhaul_load_bps"],
                         [[j + 1, *rates[:, j], cap[j], load[j]] for j in range(J)])
    mult = sol.plan.floor_multipliers
    header = ["slot"] + [f"kappa_v{v}" for v in range(V)] + [f"floor_multiplier_v{v}" for v in range(V)]
    alloc = csv_text(header, [
        [j + 1, *sol.plan.kappa[:, j], *(["" for _ in range(V)] if mult is None else mult[:, j])] for j in range(J)
    ])
    conv_rows = [[0, sol.initial_objective, 0]]
    conv_rows += [[r + 1, eta, (len(sol.inner_traces[r]) - 1) if r < len(sol.inner_traces) else 0]
                  for r, eta in enumerate(sol.outer_trace)]
    convergence = csv_text(["outer_iteration", "eta_bps", "sca_iterations"], conv_rows)
    return {"trajectory.csv": trajectory, "rates.csv": rates_csv, "allocation.csv": alloc,
            "convergence.csv": convergence, "verify.txt": sol.verification.to_text()}


def cmd_solve(args) -> int:
    start = time.perf_counter()
    scenario = load_input(args.scenario, args.seed)
    scenario = apply_overrides(scenario, args)
    mode = Mode(args.mode)
    out = Path(args.out)
    try:
        sol = run_mode(scenario, mode)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    used = sol.scenario or scenario
    for name, text in solution_tables(used, sol).items():
        write_atomic(out / name, text)
    manifest = {
        "command": "solve",
        "scenario_path": str(args.scenario),
        "seed": args.seed,
        "mode": mode.value,
        "overrides": overrides_of(args),
        "output_dir": str(out),
        "tool_version": __version__,
        "wall_clock_s": time.perf_counter() - start,
        "eta_bps": sol.eta,
        "valid": sol.verification.valid,
        "resolved_scenario": scenario_to_dict(used),
    }
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    status = "VALID" if sol.verification.valid else "INVALID"
    print(f"{mode.value}: eta = {sol.eta:.6f} bps, {status}; artifacts in {out}")
    if not sol.verification.valid:
        print("failing constraints: " + " ".join(sol.verification.failing()), file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def overrides_of(args):
    return {k: getattr(args, k) for k in ("epsilon", "max_outer", "max_sca") if getattr(args, k, None) is not None}


def apply_overrides(scenario, args):
    ov = overrides_of(args)
    if not ov:
        return scenario
    return replace(scenario, solver=replace(scenario.solver, **ov))


# -- validate -----------------------------------------------------------------------------

def _float(cell, where):
    try:
        return float(cell)
    except ValueError:
        raise ScenarioError(f"{where}: not a number: {cell!r}") from None


def reload_solution(out: Path):
    try:
        manifest = json.loads((out / "manifest.json").read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read {out / 'manifest.json'}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"manifest.json: invalid JSON ({exc})") from None
    scenario = scenario_from_dict(manifest["resolved_scenario"])
    J, V = scenario.slot_count, scenario.vehicle_count
    header, rows = read_csv(out / "trajectory.csv")
    if len(rows) != J + 1:
        raise ScenarioError(f"trajectory.csv: expected {J + 1} rows, found {len(rows)}")
    xy = np.array([[_float(r[1], "trajectory.csv"), _float(r[2], "trajectory.csv")] for r in rows])
    traj = Trajectory(xy, scenario.uav_altitude)
    header, rows = read_csv(out / "allocation.csv")
    if len(rows) != J or len(header) != 1 + 2 * V:
        raise ScenarioError("allocation.csv: shape does not match the scenario")
    kappa = np.array([[_float(c, "allocation.csv") for c in r[1:1 + V]] for r in rows]).T
    mult_cells = [r[1 + V:] for r in rows]
    mult = None
    if all(c != "" for r in mult_cells for c in r):
        mult = np.array([[_float(c, "allocation.csv") for c in r] for r in mult_cells]).T
    return manifest, scenario, traj, BandwidthPlan(kappa, float("nan"), mult)


def cmd_validate(args) -> int:
    out = Path(args.out)
    manifest, scenario, traj, plan = reload_solution(out)
    mode = Mode(manifest.get("mode", "proposed"))
    report = verify_solution(scenario, plan, traj, floor_enforced=mode is not Mode.EQUAL_BANDWIDTH,
                             binding=plan.floor_binding())
    try:
        stored = (out / "verify.txt").read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read verify.txt: {exc.strerror or exc}") from None
    text = report.to_text()
    if not report.valid:
        print(f"INVALID: failing constraints {' '.join(report.failing())}", file=sys.stderr)
        return EXIT_MISMATCH
    if text != stored:
        print("verify.txt does not match the recomputed report", file=sys.stderr)
        return EXIT_MISMATCH
    print(f"VALID: {out}")
    return EXIT_OK


# -- sweep --------------------------------------------------------------------------------

def parse_values(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {text!r}") from None
    if not values:
        raise UsageError("--values is empty")
    if any(b < a for a, b in zip(values, values[1:])):
        raise UsageError(f"--values must be sorted ascending, got {text}")
    return values


def cmd_sweep(args) -> int:
    start = time.perf_counter()
    values = parse_values(args.values)
    modes = [Mode(m.strip()).value for m in args.modes.split(",") if m.strip()]
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    template = apply_overrides(load_input(args.scenario), args)
    if template.sampler is None:
        raise ScenarioError("sweep needs a scenario with a vehicles.sampler block")
    out = Path(args.out)
    try:
        rows = sweep(template, SweepParameter(args.param), values, args.trials, args.seed, modes)
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    table = csv_text(["parameter", "value", "mode", "mean_eta_bps", "std_eta_bps", "infeasible", "failed", "trials"],
                     [[r.parameter, r.value, r.mode, r.mean, r.std, r.infeasible, r.failed, r.trials] for r in rows])
    write_atomic(out / "sweep.csv", table)
    for v in values:
        point = [r for r in rows if r.value == v]
        manifest = {
            "command": "sweep",
            "scenario_path": str(args.scenario),
            "parameter": args.param,
            "value": v,
            "seed": args.seed,
            "trials": args.trials,
            "modes": modes,
            "overrides": overrides_of(args),
            "output_dir": str(out),
            "tool_version": __version__,
            "per_seed_eta_bps": {r.mode: [[s, None if np.isnan(e) else e] for s, e in r.values] for r in point},
        }
        write_atomic(out / "points" / f"{args.param}_{fmt(v)}" / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    summary = {"command": "sweep", "wall_clock_s": time.perf_counter() - start, "tool_version": __version__,
               "resolved_template": scenario_to_dict(template)}
    write_atomic(out / "manifest.json", json.dumps(summary, indent=2) + "\n")
    print(table, end="")
    return EXIT_OK


# -- entry --------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="uavnet", description="UAV-assisted vehicular network optimiser")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def solver_flags(sp):
        sp.add_argument("--epsilon", type=float, help="relative convergence tolerance")
        sp.add_argument("--max-outer", dest="max_outer", type=int)
        sp.add_argument("--max-sca", dest="max_sca", type=int)

    s = sub.add_parser("solve", help="optimise one scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--mode", default="proposed", choices=[m.value for m in Mode])
    s.add_argument("--seed", type=int, help="vehicle sampler seed (sampled scenarios only)")
    s.add_argument("--out", default="out")
    solver_flags(s)
    s.set_defaults(func=cmd_solve)

    w = sub.add_parser("sweep", help="Monte Carlo parameter sweep")
    w.add_argument("--scenario", required=True)
    w.add_argument("--param", required=True, choices=[p.value for p in SweepParameter])
    w.add_argument("--values", required=True)
    w.add_argument("--trials", type=int, default=5)
    w.add_argument("--modes", default="proposed")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", default="sweep_out")
    solver_flags(w)
    w.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="re-verify artifacts written by solve")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, UsageError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
