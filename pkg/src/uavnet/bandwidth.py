"""Max-min bandwidth allocation for a fixed UAV trajectory.

Rates are scaled by the total bandwidth inside the LP, so the program works in
bits/s/Hz and every row is O(1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convex import ConvexProgram, SolverOptions, Status, solve
from .link import Trajectory, backhaul_capacity, spectral_efficiency, uav_vehicle_distance
from .scenario import ScenarioConfig


class InfeasibleError(RuntimeError):
    """The rate floors cannot be met; ``detail`` names the binding vehicle/slot."""

    def __init__(self, message, detail=None, report=None):
        super().__init__(message)
        self.detail = detail
        self.report = report


class SolverFailure(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class BandwidthPlan:
    kappa: np.ndarray  # (V, J) shares
    eta: float  # bps
    # LP multipliers of the rate-floor rows (d eta / d floor, both in bits/s/Hz); None if not from the LP
    floor_multipliers: np.ndarray | None = None

    def __post_init__(self):
        k = np.array(self.kappa, dtype=float)
        k.setflags(write=False)
        object.__setattr__(self, "kappa", k)
        if self.floor_multipliers is not None:
            m = np.array(self.floor_multipliers, dtype=float)
            m.setflags(write=False)
            object.__setattr__(self, "floor_multipliers", m)

    def floor_binding(self, threshold=1e-6) -> np.ndarray:
        """(V, J) mask of rate floors the LP reports as active."""
        if self.floor_multipliers is None:
            return np.zeros(self.kappa.shape, dtype=bool)
        return self.floor_multipliers > threshold


def solver_options(scenario: ScenarioConfig) -> SolverOptions:
    s = scenario.solver
    return SolverOptions(barrier_mu=s.barrier_mu, initial_t=s.initial_t, gap_tol=s.gap_tol,
                         feas_tol=s.feas_tol, max_newton=s.max_newton)


def spectral_coefficients(scenario: ScenarioConfig, traj: Trajectory) -> np.ndarray:
    """(V, J) log2(1 + SNR) per vehicle and slot, zero where the vehicle is absent."""
    pu = traj.positions()
    pv = scenario.vehicle_positions()
    d = uav_vehicle_distance(pv, pu[None, :, :], scenario.uav_altitude)
    se = spectral_efficiency(scenario.comm_power_per_vehicle, scenario.reference_gain, scenario.noise_vehicle, d)
    return np.where(scenario.presence(), se, 0.0)


def rate_coefficients(scenario: ScenarioConfig, traj: Trajectory) -> np.ndarray:
    """Per-slot rate at full bandwidth (kappa = 1), bps."""
    return scenario.total_bandwidth * spectral_coefficients(scenario, traj)


def backhaul_rates(scenario: ScenarioConfig, traj: Trajectory) -> np.ndarray:
    return backhaul_capacity(
        traj.positions(), scenario.uav_altitude, scenario.bs_position, scenario.backhaul_bandwidth,
        scenario.bs_power, scenario.reference_gain, scenario.noise_uav,
    )


def average_rates(scenario: ScenarioConfig, kappa, traj: Trajectory) -> np.ndarray:
    """(1/J) sum_j R_v[j] for every vehicle, bps."""
    return np.sum(np.asarray(kappa) * rate_coefficients(scenario, traj), axis=1) / scenario.slot_count


def min_average_rate(scenario: ScenarioConfig, kappa, traj: Trajectory) -> float:
    """The max-min objective: smallest average rate over normal-speed vehicles."""
    return float(np.min(average_rates(scenario, kappa, traj)[scenario.normal]))


def equal_split(scenario: ScenarioConfig, per_vehicle=False) -> np.ndarray:
    """Equal shares among present vehicles: 1/nu[j], or 1/V each with ``per_vehicle``."""
    pres = scenario.presence().astype(float)
    if per_vehicle:
        return pres / scenario.vehicle_count
    counts = pres.sum(axis=0)
    return np.divide(pres, counts, out=np.zeros_like(pres), where=counts > 0)


@dataclass
class _LPLayout:
    kappa_idx: np.ndarray  # (V, J) variable index or -1
    eta: int


def build_bandwidth_lp(scenario: ScenarioConfig, traj: Trajectory, coeffs=None):
    """Assemble the max-min LP; returns (program, layout)."""
    if not scenario.normal:
        raise ValueError("no normal-speed vehicle")
    B = scenario.total_bandwidth
    J = scenario.slot_count
    c = spectral_coefficients(scenario, traj) if coeffs is None else np.asarray(coeffs) / B
    pres = scenario.presence()
    V = scenario.vehicle_count
    prog = ConvexProgram()
    kidx = -np.ones((V, J), dtype=int)
    for v in range(V):
        for j in np.flatnonzero(pres[v]):
            kidx[v, j] = prog.add_variables(f"kappa[{v},{j + 1}]", lower=0.0, upper=1.0)
    eta = prog.add_variables("eta")
    prog.maximize(eta, 1.0)

    for v in scenario.normal:
        js = np.flatnonzero(pres[v])
        prog.add_linear(np.append(kidx[v, js], eta), np.append(-c[v, js] / J, 1.0), 0.0,
                        name=f"min-average vehicle {v}")
    floors = scenario.rate_floors()
    for v in scenario.high_speed:
        if floors[v] <= 0:
            continue
        for j in np.flatnonzero(pres[v]):
            prog.add_linear([kidx[v, j]], [-c[v, j]], -floors[v] / B, name=f"rate floor (9b) vehicle {v} slot {j + 1}")
    rb = backhaul_rates(scenario, traj) / B
    for j in range(J):
        vs = np.flatnonzero(pres[:, j])
        if vs.size == 0:
            continue
        prog.add_linear(kidx[vs, j], c[vs, j], rb[j], name=f"backhaul (9c) slot {j + 1}")
        prog.add_linear(kidx[vs, j], np.ones(vs.size), 1.0, name=f"simplex (9i) slot {j + 1}")
    return prog, _LPLayout(kidx, eta)


def _start_point(scenario, layout, c):
    pres = scenario.presence()
    counts = np.maximum(pres.sum(axis=0), 1)
    x = np.zeros(layout.eta + 1)
    share = np.where(pres, 0.5 / counts, 0.0)
    mask = layout.kappa_idx >= 0
    x[layout.kappa_idx[mask]] = share[mask]
    avg = np.sum(share * c, axis=1) / scenario.slot_count
    x[layout.eta] = 0.5 * float(np.min(avg[scenario.normal]))
    return x


def check_floor_reachability(scenario: ScenarioConfig, coeffs):
    """Raise InfeasibleError if some floor exceeds the full-bandwidth rate in a present slot."""
    floors = scenario.rate_floors()
    pres = scenario.presence()
    for v in scenario.high_speed:
        bad = np.flatnonzero(pres[v] & (coeffs[v] < floors[v]))
        if bad.size:
            j = int(bad[0])
            raise InfeasibleError(
                f"rate floor unreachable for vehicle {v} at slot {j + 1}: "
                f"{coeffs[v, j]:.6g} bps at full bandwidth < {floors[v]:.6g} bps",
                detail={"vehicle": int(v), "slot": j + 1, "constraint": "(9b)"},
            )


def solve_bandwidth(scenario: ScenarioConfig, traj: Trajectory, opts: SolverOptions | None = None) -> BandwidthPlan:
    opts = opts or solver_options(scenario)
    coeffs = rate_coefficients(scenario, traj)
    check_floor_reachability(scenario, coeffs)
    prog, layout = build_bandwidth_lp(scenario, traj, coeffs)
    rep = solve(prog, opts, x0=_start_point(scenario, layout, coeffs / scenario.total_bandwidth))
    if rep.status is Status.INFEASIBLE:
        raise _name_shortfall(scenario, traj, coeffs, opts, rep)
    if not rep.ok:
        raise SolverFailure(f"bandwidth LP failed: {rep.status.value} {rep.message}", report=rep)
    kappa = _extract(layout, rep.x)
    B = scenario.total_bandwidth
    floors = scenario.rate_floors()
    mult = np.zeros(kappa.shape)
    pres = scenario.presence()
    for v in scenario.high_speed:
        if floors[v] <= 0:
            continue
        js = pres[v]
        slack = (coeffs[v, js] * rep.x[layout.kappa_idx[v, js]] - floors[v]) / B
        mult[v, js] = 1.0 / (rep.barrier_t * np.maximum(slack, 1e-300))
    return BandwidthPlan(kappa, float(rep.x[layout.eta]) * B, mult)


def _name_shortfall(scenario, traj, coeffs, opts, rep):
    """Build the InfeasibleError, naming the floor that misses by the most under the elastic plan."""
    detail = {"constraint": rep.worst_constraint}
    try:
        plan, _ = elastic_bandwidth(scenario, traj, opts)
    except SolverFailure:
        return InfeasibleError(f"bandwidth LP infeasible: {rep.message}", detail=detail, report=rep)
    floors = scenario.rate_floors()
    gap = np.where(scenario.presence(), floors[:, None] - plan.kappa * coeffs, -np.inf)
    gap[scenario.normal] = -np.inf
    v, j = np.unravel_index(int(np.argmax(gap)), gap.shape)
    if gap[v, j] <= 0:
        # floors are met by the elastic plan: another row (backhaul) is the obstacle
        return InfeasibleError(f"bandwidth LP infeasible: {rep.message}", detail=detail, report=rep)
    detail = {"vehicle": int(v), "slot": int(j) + 1, "constraint": "(9b)", "shortfall_bps": float(gap[v, j])}
    return InfeasibleError(
        f"rate floors cannot all be met: vehicle {v} slot {j + 1} short by {gap[v, j]:.6g} bps "
        f"(phase I: {rep.message})", detail=detail, report=rep,
    )


def _extract(layout, x):
    mask = layout.kappa_idx >= 0
    kappa = np.zeros(layout.kappa_idx.shape)
    kappa[mask] = np.clip(x[layout.kappa_idx[mask]], 0.0, 1.0)
    return kappa


def elastic_bandwidth(scenario: ScenarioConfig, traj: Trajectory, opts: SolverOptions | None = None):
    """Diagnostic re-solve with a common slack on every rate floor.

    Returns (plan, max_shortfall_bps). The plan maximises the smallest floor margin
    and is never a valid answer to the allocation problem when the shortfall is positive.
    """
    opts = opts or solver_options(scenario)
    B = scenario.total_bandwidth
    J = scenario.slot_count
    c = spectral_coefficients(scenario, traj)
    pres = scenario.presence()
    V = scenario.vehicle_count
    prog = ConvexProgram()
    kidx = -np.ones((V, J), dtype=int)
    for v in range(V):
        for j in np.flatnonzero(pres[v]):
            kidx[v, j] = prog.add_variables(f"kappa[{v},{j + 1}]", lower=0.0, upper=1.0)
    slack = prog.add_variables("shortfall")
    prog.maximize(slack, -1.0)
    floors = scenario.rate_floors()
    for v in scenario.high_speed:
        for j in np.flatnonzero(pres[v]):
            # kappa*c + shortfall >= floor, in units of the floor
            scale = max(floors[v] / B, 1e-12)
            prog.add_linear([kidx[v, j], slack], [-c[v, j] / scale, -1.0], -1.0,
                            name=f"elastic floor vehicle {v} slot {j + 1}")
    rb = backhaul_rates(scenario, traj) / B
    for j in range(J):
        vs = np.flatnonzero(pres[:, j])
        if vs.size:
            prog.add_linear(kidx[vs, j], c[vs, j], rb[j], name=f"backhaul (9c) slot {j + 1}")
            prog.add_linear(kidx[vs, j], np.ones(vs.size), 1.0, name=f"simplex (9i) slot {j + 1}")
    x0 = np.zeros(prog.n)
    counts = np.maximum(pres.sum(axis=0), 1)
    mask = kidx >= 0
    x0[kidx[mask]] = np.where(pres, 0.5 / counts, 0.0)[mask]
    x0[slack] = 2.0
    rep = solve(prog, opts, x0=x0)
    if not rep.ok:
        raise SolverFailure(f"elastic LP failed: {rep.status.value} {rep.message}", report=rep)
    kappa = np.zeros((V, J))
    kappa[mask] = np.clip(rep.x[kidx[mask]], 0.0, 1.0)
    shortfall = max(0.0, float(rep.x[slack])) * float(np.max(floors[scenario.high_speed], initial=0.0))
    eta = min_average_rate(scenario, kappa, traj)
    return BandwidthPlan(kappa, eta), shortfall
