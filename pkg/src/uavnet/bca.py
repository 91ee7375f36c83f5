"""Alternating bandwidth/trajectory optimisation, baselines, verification and experiments."""
from __future__ import annotations

import enum
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bandwidth import (
    BandwidthPlan, InfeasibleError, SolverFailure, average_rates, backhaul_rates, elastic_bandwidth,
    equal_split, min_average_rate, rate_coefficients, solve_bandwidth, solver_options,
)
from .convex import SolverOptions
from .link import (
    Trajectory, propulsion_plus_comm_power, rate_distance_derivative, spectral_efficiency, uav_speed_profile,
    uav_vehicle_distance,
)
from .scenario import SamplerSpec, ScenarioConfig, resample
from .trajectory import hover_trajectory, initial_trajectory, optimize_trajectory, restore_floor_feasibility

log = logging.getLogger(__name__)

VERIFY_TOL = 1e-6
CONSTRAINTS = ("(9b)", "(9c)", "(9d)", "(9e)", "(9f)", "(9g)", "(9h)", "(9i)")


class Mode(str, enum.Enum):
    PROPOSED = "proposed"
    CENTER_HOVER = "center-hover"
    EQUAL_BANDWIDTH = "equal-bandwidth"


@dataclass(frozen=True)
class VerificationReport:
    """Exact constraint check of a (plan, trajectory) pair.

    ``violations`` holds relative excesses (0 when satisfied). The backhaul entry is
    also given in bps. ``floor_enforced`` is False for the equal-bandwidth baseline,
    whose shares cannot react to the rate floors; there (9b) is reported but does
    not decide validity.
    """

    violations: dict
    backhaul_excess_bps: float
    kappa_bound_min_margin: float  # min over floor slots of (kappa - bound)/bound
    kappa_bound_binding_gap: float  # max |kappa - bound|/bound over LP-active floor slots
    binding_slots: int
    derivative_sign_ok: bool
    derivative_fd_error: float
    floor_enforced: bool = True
    tolerance: float = VERIFY_TOL

    @property
    def valid(self) -> bool:
        checked = [k for k in CONSTRAINTS if self.floor_enforced or k != "(9b)"]
        return all(self.violations[k] <= self.tolerance for k in checked) and self.derivative_sign_ok

    def failing(self) -> list:
        return [k for k in CONSTRAINTS if self.violations[k] > self.tolerance and (self.floor_enforced or k != "(9b)")]

    def to_text(self) -> str:
        lines = [f"status {'VALID' if self.valid else 'INVALID'}"]
        for k in CONSTRAINTS:
            note = "" if self.floor_enforced or k != "(9b)" else " reported-not-enforced"
            lines.append(f"violation {k} {self.violations[k]:.17g}{note}")
        lines += [
            f"backhaul_excess_bps {self.backhaul_excess_bps:.17g}",
            f"kappa_bound_min_margin {self.kappa_bound_min_margin:.17g}",
            f"kappa_bound_binding_gap {self.kappa_bound_binding_gap:.17g}",
            f"binding_slots {self.binding_slots}",
            f"derivative_sign {'ok' if self.derivative_sign_ok else 'FAIL'}",
            f"derivative_fd_error {self.derivative_fd_error:.17g}",
            f"tolerance {self.tolerance:.17g}",
        ]
        if self.failing():
            lines.append("failing " + " ".join(self.failing()))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Solution:
    mode: Mode
    trajectory: Trajectory
    plan: BandwidthPlan
    eta: float
    outer_trace: tuple
    inner_traces: tuple
    per_vehicle_avg_rates: np.ndarray
    per_slot_rates: np.ndarray
    verification: VerificationReport
    initial_objective: float = float("nan")
    repaired: bool = False
    scenario: ScenarioConfig | None = field(default=None, repr=False, compare=False)


def _rel(excess, scale):
    scale = np.maximum(np.abs(scale), 1e-300)
    return float(np.max(np.maximum(excess, 0.0) / scale, initial=0.0))


def verify_solution(scenario: ScenarioConfig, plan: BandwidthPlan, traj: Trajectory, floor_enforced=True,
                    binding=None, tol=VERIFY_TOL) -> VerificationReport:
    """Recompute every constraint from the exact link, power and mobility formulas."""
    kappa = np.asarray(plan.kappa, dtype=float)
    pres = scenario.presence()
    coeff = rate_coefficients(scenario, traj)
    rates = kappa * coeff
    floors = scenario.rate_floors()
    viol = {}

    fast = np.zeros(pres.shape, dtype=bool)
    for v in scenario.high_speed:
        if floors[v] > 0:
            fast[v] = pres[v]
    floor_mat = np.broadcast_to(floors[:, None], pres.shape)
    viol["(9b)"] = _rel((floor_mat - rates)[fast], floor_mat[fast])

    load = rates.sum(axis=0)
    r_b = backhaul_rates(scenario, traj)
    viol["(9c)"] = _rel(load - r_b, r_b)
    backhaul_excess = float(np.max(np.maximum(load - r_b, 0.0), initial=0.0))

    speed = uav_speed_profile(traj.xy, scenario.slot_length)
    power = propulsion_plus_comm_power(speed, scenario.power_model, scenario.total_comm_power)
    viol["(9d)"] = _rel(power - scenario.power_budget, scenario.power_budget)
    step_cap = scenario.uav_max_speed * scenario.slot_length
    viol["(9e)"] = _rel(speed * scenario.slot_length - step_cap, step_cap)
    x, y = traj.xy[:, 0], traj.xy[:, 1]
    viol["(9f)"] = _rel(np.maximum(-x, x - scenario.road_length), scenario.road_length)
    viol["(9g)"] = _rel(np.maximum(-y, y - scenario.road_width), scenario.road_width)
    viol["(9h)"] = max(_rel(-kappa, 1.0), _rel(kappa - 1.0, 1.0), _rel(np.abs(kappa[~pres]), 1.0))
    viol["(9i)"] = _rel(kappa.sum(axis=0) - 1.0, 1.0)
    if not np.array_equal(traj.xy[0], np.asarray(scenario.uav_initial_xy)):
        viol["(9f)"] = max(viol["(9f)"], 1.0)  # start position is fixed data

    # kappa >= R_th / (B log2(1 + SNR)), the per-slot form of the rate floor
    if fast.any():
        bound = floor_mat[fast] / coeff[fast]
        margin = (kappa[fast] - bound) / bound
        min_margin = float(np.min(margin))
        bind = np.zeros(pres.shape, dtype=bool) if binding is None else (np.asarray(binding) & fast)
        gap = float(np.max(np.abs((kappa[bind] - floor_mat[bind] / coeff[bind]) / (floor_mat[bind] / coeff[bind])),
                           initial=0.0))
        n_bind = int(bind.sum())
    else:
        min_margin, gap, n_bind = float("inf"), 0.0, 0

    sign_ok, fd_err = _derivative_spot_check(scenario, traj)
    return VerificationReport(viol, backhaul_excess, min_margin, gap, n_bind, sign_ok, fd_err, floor_enforced, tol)


def _derivative_spot_check(scenario: ScenarioConfig, traj: Trajectory):
    """Analytic d rate / d distance vs central differences at the solution's distances."""
    pres = scenario.presence()
    if not pres.any():
        return True, 0.0
    d = uav_vehicle_distance(scenario.vehicle_positions(), traj.positions()[None], scenario.uav_altitude)[pres]
    args = (1.0, scenario.total_bandwidth, scenario.comm_power_per_vehicle, scenario.reference_gain,
            scenario.noise_vehicle)
    analytic = rate_distance_derivative(*args, d)
    h = 1e-4 * d
    rate = lambda dd: scenario.total_bandwidth * spectral_efficiency(*args[2:], dd)  # noqa: E731
    fd = (rate(d + h) - rate(d - h)) / (2 * h)
    err = float(np.max(np.abs(fd - analytic) / np.abs(analytic)))
    return bool(np.all(analytic < 0)), err


def repair_backhaul(scenario: ScenarioConfig, plan: BandwidthPlan, traj: Trajectory) -> BandwidthPlan:
    """Scale every share in slots whose exact backhaul load exceeds capacity."""
    kappa = np.array(plan.kappa)
    load = np.sum(kappa * rate_coefficients(scenario, traj), axis=0)
    cap = backhaul_rates(scenario, traj)
    over = load > cap
    kappa[:, over] *= (cap[over] / load[over])[None, :]
    return BandwidthPlan(kappa, min_average_rate(scenario, kappa, traj))


def _finish(scenario, mode, plan, traj, outer, inner, initial, floor_enforced, repaired=False):
    # one last allocation on the final trajectory restores the exact backhaul rows
    if mode is not Mode.EQUAL_BANDWIDTH:
        try:
            polished = solve_bandwidth(scenario, traj)
            if polished.eta >= min_average_rate(scenario, plan.kappa, traj) or _backhaul_excess(scenario, plan, traj) > 0:
                plan = polished
        except (InfeasibleError, SolverFailure) as exc:
            log.warning("final allocation failed (%s); keeping the last plan", exc)
    if _backhaul_excess(scenario, plan, traj) > 0:
        plan = repair_backhaul(scenario, plan, traj)
        repaired = True
    eta = min_average_rate(scenario, plan.kappa, traj)
    report = verify_solution(scenario, plan, traj, floor_enforced=floor_enforced, binding=plan.floor_binding())
    return Solution(
        mode=mode, trajectory=traj, plan=BandwidthPlan(plan.kappa, eta, plan.floor_multipliers), eta=eta,
        outer_trace=tuple(outer), inner_traces=tuple(tuple(t) for t in inner),
        per_vehicle_avg_rates=average_rates(scenario, plan.kappa, traj),
        per_slot_rates=np.asarray(plan.kappa) * rate_coefficients(scenario, traj),
        verification=report, initial_objective=initial, repaired=repaired, scenario=scenario,
    )


def _backhaul_excess(scenario, plan, traj):
    load = np.sum(np.asarray(plan.kappa) * rate_coefficients(scenario, traj), axis=0)
    return float(np.max(load - backhaul_rates(scenario, traj)))


def _first_plan(scenario, traj, opts):
    """Initial allocation, with one elastic trajectory pass if the floors are unreachable."""
    try:
        return solve_bandwidth(scenario, traj, opts), traj
    except InfeasibleError as first:
        elastic_plan, shortfall = elastic_bandwidth(scenario, traj, opts)
        log.info("initial allocation infeasible (%s); elastic shortfall %.6g bps", first, shortfall)
        moved = restore_floor_feasibility(scenario, elastic_plan, traj, opts)
        try:
            return solve_bandwidth(scenario, moved, opts), moved
        except InfeasibleError as second:
            _, left = elastic_bandwidth(scenario, moved, opts)
            detail = dict(second.detail or {})
            detail["shortfall_bps"] = left
            raise InfeasibleError(f"{second} (largest floor shortfall after restoration {left:.6g} bps)",
                                  detail=detail, report=second.report) from None


def run_bca(scenario: ScenarioConfig, opts: SolverOptions | None = None, init_traj: Trajectory | None = None) -> Solution:
    """Alternate the bandwidth LP and the trajectory SCA until the objective settles."""
    opts = opts or solver_options(scenario)
    eps = scenario.solver.epsilon
    traj = initial_trajectory(scenario) if init_traj is None else init_traj
    initial = min_average_rate(scenario, equal_split(scenario), traj)
    plan, traj = _first_plan(scenario, traj, opts)
    outer, inner = [], []
    previous = initial
    for r in range(1, scenario.solver.max_outer + 1):
        if r > 1:
            try:
                candidate = solve_bandwidth(scenario, traj, opts)
            except InfeasibleError as exc:
                log.warning("allocation infeasible at outer iteration %d (%s); stopping", r, exc)
                break
            except SolverFailure as exc:
                raise SolverFailure(f"outer iteration {r}: {exc}", report=exc.report) from None
            # the old plan stays if it is still exactly feasible and the LP did not beat it
            old = min_average_rate(scenario, plan.kappa, traj)
            if candidate.eta >= old or _backhaul_excess(scenario, plan, traj) > 0:
                plan = candidate
        try:
            sca = optimize_trajectory(scenario, plan, traj, opts)
        except InfeasibleError as exc:
            raise InfeasibleError(f"outer iteration {r}: {exc}", detail=exc.detail, report=exc.report) from None
        except SolverFailure as exc:
            raise SolverFailure(f"outer iteration {r}: {exc}", report=exc.report) from None
        traj = sca.trajectory
        inner.append(sca.trace)
        value = min_average_rate(scenario, plan.kappa, traj)
        outer.append(value)
        log.info("outer iteration %d: eta %.10g (%d SCA iterations)", r, value, sca.iterations)
        if not abs(value - previous) >= eps * abs(previous):
            break
        previous = value
    return _finish(scenario, Mode.PROPOSED, plan, traj, outer, inner, initial, True)


def center_point(scenario: ScenarioConfig):
    return (scenario.road_length / 2, scenario.road_width / 2)


def run_baseline(scenario: ScenarioConfig, mode, opts: SolverOptions | None = None) -> Solution:
    mode = Mode(mode)
    opts = opts or solver_options(scenario)
    if mode is Mode.CENTER_HOVER:
        pinned = replace(scenario, uav_initial_xy=center_point(scenario))
        traj = hover_trajectory(pinned, center_point(scenario))
        plan = solve_bandwidth(pinned, traj, opts)
        return _finish(pinned, mode, plan, traj, [plan.eta], [], plan.eta, True)
    if mode is Mode.EQUAL_BANDWIDTH:
        kappa = equal_split(scenario, per_vehicle=True)
        traj0 = initial_trajectory(scenario)
        plan = BandwidthPlan(kappa, min_average_rate(scenario, kappa, traj0))
        sca = optimize_trajectory(scenario, plan, traj0, opts, enforce_floor=False)
        return _finish(scenario, mode, plan, sca.trajectory, [sca.eta], [sca.trace], plan.eta, False)
    return run_bca(scenario, opts)


def run_mode(scenario: ScenarioConfig, mode, opts=None) -> Solution:
    mode = Mode(mode)
    return run_bca(scenario, opts) if mode is Mode.PROPOSED else run_baseline(scenario, mode, opts)


# -- experiments ---------------------------------------------------------------------------

def worker_count(tasks: int) -> int:
    cap = os.environ.get("UAVNET_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"UAVNET_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(n, tasks))


def trial_scenario(template: ScenarioConfig, seed: int, floors=None) -> ScenarioConfig:
    spec = replace(template.sampler or SamplerSpec(), seed=int(seed))
    scn = resample(template, spec)
    if floors is not None:
        scn = replace(scn, vehicles=tuple(replace(v, rate_floor=f) for v, f in zip(scn.vehicles, floors)))
    return scn


def _run_trial(args):
    scenario, modes = args
    out = {}
    for m in modes:
        try:
            out[m] = ("ok", run_mode(scenario, m).eta)
        except InfeasibleError as exc:
            out[m] = ("infeasible", str(exc))
        except SolverFailure as exc:
            out[m] = ("failed", str(exc))
    return out


@dataclass(frozen=True)
class ModeStats:
    mean: float
    std: float
    values: tuple  # (seed, eta or nan) in seed order
    infeasible: int
    failed: int

    @property
    def completed(self) -> int:
        return sum(1 for _, v in self.values if not math.isnan(v))


def _aggregate(seeds, results, modes):
    stats = {}
    for m in modes:
        vals, infeasible, failed = [], 0, 0
        for seed, res in zip(seeds, results):
            status, value = res[m]
            if status == "ok":
                vals.append((seed, float(value)))
            else:
                infeasible += status == "infeasible"
                failed += status == "failed"
                vals.append((seed, float("nan")))
        good = np.array([v for _, v in vals if not math.isnan(v)])
        mean = float(np.mean(good)) if good.size else float("nan")
        std = float(np.std(good, ddof=1)) if good.size > 1 else (0.0 if good.size else float("nan"))
        stats[m] = ModeStats(mean, std, tuple(vals), infeasible, failed)
    return stats


def _map(tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [_run_trial(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_trial, tasks))


def monte_carlo(template: ScenarioConfig, trials: int, base_seed: int, modes, workers=None, floors=None):
    """Paired trials: trial k redraws the vehicles with seed base_seed + k and runs every mode on it.

    Returns {mode: ModeStats}; infeasible or failed trials are excluded from the statistics.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    modes = [Mode(m).value for m in modes]
    seeds = [base_seed + k for k in range(trials)]
    tasks = [(trial_scenario(template, s, floors), modes) for s in seeds]
    results = _map(tasks, worker_count(len(tasks)) if workers is None else workers)
    return _aggregate(seeds, results, modes)


class SweepParameter(str, enum.Enum):
    VEHICLE_COUNT = "vehicles"
    TRANSMIT_POWER = "power"
    RATE_FLOOR = "rth"


SECOND_FLOOR = 1e3  # floor kept on the slower high-speed vehicle in the rate-floor sweep
FLOOR_BANDS = ((38.0, 40.0), (None, 38.0))  # fastest vehicle first; None means the speed limit


def sweep_point(template: ScenarioConfig, parameter, value):
    """Template and per-vehicle floors for one sweep value."""
    parameter = SweepParameter(parameter)
    spec = template.sampler or SamplerSpec()
    if parameter is SweepParameter.VEHICLE_COUNT:
        count = int(value)
        if count != value or count < 1:
            raise ValueError(f"vehicle count must be a positive integer, got {value!r}")
        high = (count - 1) // 2
        return replace(template, sampler=replace(spec, high_speed_count=high, normal_count=count - high,
                                                 high_speed_bands=None)), None
    if parameter is SweepParameter.TRANSMIT_POWER:
        return replace(template, comm_power_per_vehicle=float(value)), None
    bands = tuple((template.speed_limit if lo is None else lo, hi) for lo, hi in FLOOR_BANDS)
    spec = replace(spec, high_speed_count=2, high_speed_bands=bands)
    floors = [float(value), SECOND_FLOOR] + [None] * spec.normal_count
    return replace(template, sampler=spec), floors


@dataclass(frozen=True)
class SweepRow:
    parameter: str
    value: float
    mode: str
    mean: float
    std: float
    infeasible: int
    failed: int
    trials: int
    values: tuple


def sweep(template: ScenarioConfig, parameter, values, trials: int, seed: int, modes, workers=None):
    """Monte Carlo aggregate per sweep value; every value reuses the same seeds (paired)."""
    values = [float(v) for v in values]
    if any(b < a for a, b in zip(values, values[1:])):
        raise ValueError("sweep values must be sorted ascending")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    parameter = SweepParameter(parameter)
    modes = [Mode(m).value for m in modes]
    seeds = [seed + k for k in range(trials)]
    tasks = []
    for v in values:
        tmpl, floors = sweep_point(template, parameter, v)
        tasks.extend((trial_scenario(tmpl, s, floors), modes) for s in seeds)
    results = _map(tasks, worker_count(len(tasks)) if workers is None else workers)
    rows = []
    for i, v in enumerate(values):
        stats = _aggregate(seeds, results[i * trials:(i + 1) * trials], modes)
        for m in modes:
            st = stats[m]
            rows.append(SweepRow(parameter.value, v, m, st.mean, st.std, st.infeasible, st.failed, trials, st.values))
    return rows
