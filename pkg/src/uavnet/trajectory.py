"""Trajectory optimisation for a fixed bandwidth plan by successive convex approximation.

Inside the convex subproblem positions are in kilometers, squared distances in
km^2 and rates in bits/s/Hz (rate / B); this keeps every row O(1). The public
functions take and return SI quantities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bandwidth import (
    BandwidthPlan, InfeasibleError, SolverFailure, average_rates, backhaul_rates, min_average_rate,
    solver_options,
)
from .convex import ConvexProgram, SolverOptions, Status, solve
from .link import LOG2E, Trajectory, bs_distance, induced_power_factor, max_speed_under_power, uav_speed_profile
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)

KM = 1000.0
D_FLOOR = 1e-6  # lower bound on the induced-power auxiliary, keeps 1/D^2 smooth


@dataclass(frozen=True)
class ScaLocalPoint:
    """Expansion point: squared distances (m^2), induced-power factor and speeds."""

    xy: np.ndarray  # (J+1, 2) m
    t_v: np.ndarray  # (V, J) m^2
    t_b: np.ndarray  # (J,) m^2
    D: np.ndarray  # (J,)
    speed: np.ndarray  # (J,) m/s


def linearize_rate(t_r, a):
    """Tangent of t -> log2(1 + a/t) at t_r, as (alpha, phi): value alpha - phi*(t - t_r)."""
    t_r = np.asarray(t_r, dtype=float)
    a = np.asarray(a, dtype=float)
    alpha = np.log1p(a / t_r) * LOG2E
    phi = LOG2E * a / ((t_r + a) * t_r)
    return alpha, phi


def linearized_rate_value(t, t_r, a):
    alpha, phi = linearize_rate(t_r, a)
    return alpha - phi * (np.asarray(t, dtype=float) - t_r)


def linearize_power_rhs(D_r, S_r, s0):
    """Affine minorant of D^2 + S^2/s0^2 at (D_r, S_r).

    Returns ``(coef_D, coef_S, const)`` with value ``coef_D*D + coef_S*S + const``.
    """
    D_r = np.asarray(D_r, dtype=float)
    S_r = np.asarray(S_r, dtype=float)
    return 2.0 * D_r, 2.0 * S_r / s0 ** 2, -(D_r ** 2) - S_r ** 2 / s0 ** 2


def squared_distances(scenario: ScenarioConfig, xy) -> np.ndarray:
    pu = np.asarray(xy)[1:]
    pv = scenario.vehicle_positions()
    diff = pv - pu[None]
    return np.sum(diff * diff, axis=-1) + scenario.uav_altitude ** 2


def init_local_point(scenario: ScenarioConfig, traj: Trajectory) -> ScaLocalPoint:
    """Local point whose auxiliaries equal their exact values on ``traj``."""
    xy = np.asarray(traj.xy, dtype=float)
    speed = uav_speed_profile(xy, scenario.slot_length)
    t_b = bs_distance(xy[1:], scenario.uav_altitude, scenario.bs_position) ** 2
    return ScaLocalPoint(
        xy=xy.copy(),
        t_v=squared_distances(scenario, xy),
        t_b=t_b,
        D=induced_power_factor(speed, scenario.power_model.hover_induced_speed),
        speed=speed,
    )


def cruise_speed(scenario: ScenarioConfig) -> float:
    """Power-feasible cruise speed for the default initial trajectory."""
    cap = max_speed_under_power(scenario.power_model, scenario.total_comm_power, scenario.power_budget)
    return min(scenario.uav_max_speed, cap, scenario.road_length / scenario.flight_duration)


def initial_trajectory(scenario: ScenarioConfig, speed=None) -> Trajectory:
    """Fly along y = E_y/2 at a constant feasible speed, clipped to the road box."""
    J, dt = scenario.slot_count, scenario.slot_length
    v = cruise_speed(scenario) if speed is None else float(speed)
    cap = min(scenario.uav_max_speed,
              max_speed_under_power(scenario.power_model, scenario.total_comm_power, scenario.power_budget))
    lateral = np.sqrt(max((0.99 * cap * dt) ** 2 - (v * dt) ** 2, 0.0))
    xy = np.empty((J + 1, 2))
    xy[0] = scenario.uav_initial_xy
    target_y = scenario.road_width / 2
    for j in range(1, J + 1):
        x = min(xy[j - 1, 0] + v * dt, scenario.road_length)
        dy = np.clip(target_y - xy[j - 1, 1], -lateral, lateral)
        xy[j] = (x, xy[j - 1, 1] + dy)
    return Trajectory(xy, scenario.uav_altitude)


def hover_trajectory(scenario: ScenarioConfig, point) -> Trajectory:
    """Stationary at ``point`` for every slot (index 0 keeps the scenario start)."""
    J = scenario.slot_count
    xy = np.tile(np.asarray(point, dtype=float), (J + 1, 1))
    xy[0] = scenario.uav_initial_xy
    return Trajectory(xy, scenario.uav_altitude)


@dataclass
class _TrajLayout:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    D: np.ndarray
    t_b: np.ndarray  # (J,) index or -1
    t_v: np.ndarray  # (V, J) index or -1
    eta: int
    start: np.ndarray = field(default=None)


def _power_block(scenario: ScenarioConfig):
    pm = scenario.power_model
    PU = scenario.power_budget
    base = scenario.total_comm_power + pm.blade_profile_power
    k2 = 3.0 * pm.blade_profile_power / pm.tip_speed ** 2
    k3 = pm.drag_coefficient
    Pi = pm.induced_power

    def fn(X):
        s, D = X[:, 0], X[:, 1]
        a = np.abs(s)
        g = (base + k2 * s * s + Pi * D + k3 * a ** 3) / PU - 1.0
        G = np.column_stack([(2 * k2 * s + 3 * k3 * s * a) / PU, np.full(s.shape, Pi / PU)])
        H = np.zeros((len(s), 2, 2))
        H[:, 0, 0] = (2 * k2 + 6 * k3 * a) / PU
        return g, G, H

    return fn


def _induced_block(cD, cS, const):
    """1/D^2 - (cD*D + cS*S + const) <= 0 rowwise."""

    def fn(X):
        D, S = X[:, 0], X[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(D > 0, 1.0 / (D * D), np.inf) - (cD * D + cS * S + const)
            G = np.column_stack([-2.0 / D ** 3 - cD, -cS])
        H = np.zeros((len(D), 2, 2))
        H[:, 0, 0] = np.where(D > 0, 6.0 / D ** 4, 0.0)
        return g, G, H

    return fn


def build_trajectory_subproblem(scenario: ScenarioConfig, plan: BandwidthPlan, local: ScaLocalPoint,
                                enforce_floor=True, elastic=False):
    """Convex subproblem around ``local``; returns (program, layout).

    With ``elastic`` the rate floors get a common slack and the objective becomes
    minimising that slack (used only to restore feasibility).
    """
    J, V = scenario.slot_count, scenario.vehicle_count
    B = scenario.total_bandwidth
    dt = scenario.slot_length
    z = scenario.uav_altitude / KM
    kappa = np.asarray(plan.kappa)
    pres = scenario.presence()
    active = pres & (kappa > 0)
    a_v = scenario.comm_power_per_vehicle * scenario.reference_gain / scenario.noise_vehicle / KM ** 2
    a_b = scenario.bs_power * scenario.reference_gain / scenario.noise_uav / KM ** 2
    tv_r = local.t_v / KM ** 2
    tb_r = local.t_b / KM ** 2
    alpha_v, phi_v = linearize_rate(tv_r, a_v)
    alpha_b, phi_b = linearize_rate(tb_r, a_b)
    bx, by, bz = (np.asarray(scenario.bs_position) / KM)
    Ex, Ey = scenario.road_length / KM, scenario.road_width / KM
    tv_max = Ex ** 2 + Ey ** 2 + z ** 2
    tb_max = (max(abs(bx), abs(bx - Ex))) ** 2 + (max(abs(by), abs(by - Ey))) ** 2 + (bz - z) ** 2

    prog = ConvexProgram()
    x = prog.add_variables("x", J, lower=0.0, upper=Ex)
    y = prog.add_variables("y", J, lower=0.0, upper=Ey)
    s = prog.add_variables("speed", J, lower=0.0, upper=scenario.uav_max_speed)
    D = prog.add_variables("D", J, lower=D_FLOOR)
    tv = -np.ones((V, J), dtype=int)
    for v in range(V):
        for j in np.flatnonzero(active[v]):
            tv[v, j] = prog.add_variables(f"t[{v},{j + 1}]", upper=tv_max)
    slots = np.flatnonzero(active.any(axis=0))
    tb = -np.ones(J, dtype=int)
    for j in slots:
        tb[j] = prog.add_variables(f"tB[{j + 1}]", upper=tb_max)
    # eta is off the objective in elastic mode, so it needs a floor to keep the barrier bounded
    eta = prog.add_variables("eta", lower=-1.0 if elastic else -np.inf)
    slack = prog.add_variables("floor_slack", lower=0.0) if elastic else None
    if elastic:
        prog.maximize(slack, -1.0)
    else:
        prog.maximize(eta, 1.0)

    # min-average rows: eta + (1/J) sum k*phi*t <= (1/J) sum k*(phi*t_r + alpha)
    for v in scenario.normal:
        js = np.flatnonzero(active[v])
        k = kappa[v, js]
        prog.add_linear(
            np.append(tv[v, js], eta), np.append(k * phi_v[v, js] / J, 1.0),
            float(np.sum(k * (phi_v[v, js] * tv_r[v, js] + alpha_v[v, js])) / J),
            name=f"min-average (22b) vehicle {v}",
        )
    # rate floors, divided through by kappa: phi*t <= phi*t_r + alpha - R_th/(B*kappa)
    floors = scenario.rate_floors()
    if enforce_floor:
        for v in scenario.high_speed:
            if floors[v] <= 0:
                continue
            for j in np.flatnonzero(active[v]):
                rhs = phi_v[v, j] * tv_r[v, j] + alpha_v[v, j] - floors[v] / (B * kappa[v, j])
                idx, co = [tv[v, j]], [phi_v[v, j]]
                if elastic:
                    idx, co = [tv[v, j], slack], [phi_v[v, j], -1.0]
                prog.add_linear(idx, co, rhs, name=f"rate floor (22c) vehicle {v} slot {j + 1}")
    # backhaul rows: -sum k*phi*t_v + (B_BH/B)*phi_B*t_B <= (B_BH/B)(phi_B*t_Br + alpha_B) - sum k(phi*t_r + alpha)
    ratio = scenario.backhaul_bandwidth / B
    for j in slots:
        vs = np.flatnonzero(active[:, j])
        k = kappa[vs, j]
        rhs = ratio * (phi_b[j] * tb_r[j] + alpha_b[j]) - float(np.sum(k * (phi_v[vs, j] * tv_r[vs, j] + alpha_v[vs, j])))
        prog.add_linear(np.append(tv[vs, j], tb[j]), np.append(-k * phi_v[vs, j], ratio * phi_b[j]), rhs,
                        name=f"backhaul (22d) slot {j + 1}")

    # squared-distance epigraphs ||p - p_v||^2 + z^2 <= t
    vv, jj = np.nonzero(tv >= 0)
    if vv.size:
        pv = scenario.vehicle_positions() / KM
        idx = np.column_stack([x[jj], y[jj], tv[vv, jj]])
        M = np.tile(np.array([[1.0, 0, 0], [0, 1.0, 0]]), (vv.size, 1, 1))
        q = -pv[vv, jj]
        a = np.tile([0.0, 0.0, 1.0], (vv.size, 1))
        prog.add_quadratic(idx, M, q, a, np.full(vv.size, -z * z),
                           [f"distance (22f) vehicle {v} slot {j + 1}" for v, j in zip(vv, jj)])
    if slots.size:
        idx = np.column_stack([x[slots], y[slots], tb[slots]])
        M = np.tile(np.array([[1.0, 0, 0], [0, 1.0, 0]]), (slots.size, 1, 1))
        q = np.tile([-bx, -by], (slots.size, 1))
        a = np.tile([0.0, 0.0, 1.0], (slots.size, 1))
        prog.add_quadratic(idx, M, q, a, np.full(slots.size, -(bz - z) ** 2),
                           [f"bs distance (22g) slot {j + 1}" for j in slots])

    # speed epigraph ||p[j] - p[j-1]|| * (KM/dt) <= s[j]
    c = KM / dt
    x0, y0 = np.asarray(scenario.uav_initial_xy) / KM
    prog.add_soc([[x[0], y[0], s[0]]], [[[c, 0, 0], [0, c, 0]]], [[-c * x0, -c * y0]], [[0, 0, 1.0]], [0.0],
                 ["speed (9e) slot 1"])
    if J > 1:
        idx = np.column_stack([x[1:], y[1:], x[:-1], y[:-1], s[1:]])
        M = np.tile(np.array([[c, 0, -c, 0, 0], [0, c, 0, -c, 0]]), (J - 1, 1, 1))
        a = np.tile([0, 0, 0, 0, 1.0], (J - 1, 1))
        prog.add_soc(idx, M, np.zeros((J - 1, 2)), a, np.zeros(J - 1),
                     [f"speed (9e) slot {j + 1}" for j in range(1, J)])

    prog.add_smooth(np.column_stack([s, D]), _power_block(scenario), [f"power (22e) slot {j + 1}" for j in range(J)])
    cD, cS, const = linearize_power_rhs(local.D, local.speed, scenario.power_model.hover_induced_speed)
    prog.add_smooth(np.column_stack([D, s]), _induced_block(cD, cS, const),
                    [f"induced power (24b) slot {j + 1}" for j in range(J)])

    layout = _TrajLayout(x, y, s, D, tb, tv, eta)
    layout.start = _start_point(scenario, plan, local, layout, prog.n, alpha_v, slack)
    return prog, layout


def _start_point(scenario, plan, local, layout, n, alpha_v, slack):
    """The local point with the auxiliaries nudged inward; phase I takes over if still on a boundary."""
    J = scenario.slot_count
    x0 = np.zeros(n)
    x0[layout.x] = local.xy[1:, 0] / KM
    x0[layout.y] = local.xy[1:, 1] / KM
    x0[layout.s] = np.minimum(local.speed * (1 + 1e-9) + 1e-9, scenario.uav_max_speed)
    x0[layout.D] = np.maximum(local.D * (1 + 1e-9), D_FLOOR * 2)
    m = layout.t_v >= 0
    x0[layout.t_v[m]] = (local.t_v / KM ** 2)[m] * (1 + 1e-9)
    mb = layout.t_b >= 0
    x0[layout.t_b[mb]] = (local.t_b / KM ** 2)[mb] * (1 + 1e-9)
    kappa = np.asarray(plan.kappa)
    avg = np.sum(np.where(m, kappa * alpha_v, 0.0), axis=1) / J
    x0[layout.eta] = float(np.min(avg[scenario.normal])) * (1 - 1e-6) - 1e-9
    if slack is not None:
        x0[slack] = 1.0
    return x0


def layout_trajectory(scenario: ScenarioConfig, layout, x) -> Trajectory:
    xy = np.empty((scenario.slot_count + 1, 2))
    xy[0] = scenario.uav_initial_xy
    xy[1:, 0] = np.clip(x[layout.x] * KM, 0.0, scenario.road_length)
    xy[1:, 1] = np.clip(x[layout.y] * KM, 0.0, scenario.road_width)
    return Trajectory(xy, scenario.uav_altitude)


def true_objective(scenario: ScenarioConfig, plan: BandwidthPlan, traj: Trajectory) -> float:
    """Exact max-min average rate (bps) of the normal vehicles."""
    return min_average_rate(scenario, plan.kappa, traj)


def linearized_objective(scenario: ScenarioConfig, plan: BandwidthPlan, local: ScaLocalPoint, t_v) -> float:
    """Min over normal vehicles of the tangent-bound average rate at squared distances ``t_v`` (m^2)."""
    a = scenario.comm_power_per_vehicle * scenario.reference_gain / scenario.noise_vehicle
    lin = linearized_rate_value(t_v, local.t_v, a)
    rates = scenario.total_bandwidth * np.asarray(plan.kappa) * np.where(scenario.presence(), lin, 0.0)
    avg = rates.sum(axis=1) / scenario.slot_count
    return float(np.min(avg[scenario.normal]))


@dataclass
class ScaResult:
    trajectory: Trajectory
    eta: float
    trace: list
    iterations: int
    newton_steps: int
    converged: bool


def optimize_trajectory(scenario: ScenarioConfig, plan: BandwidthPlan, init_traj: Trajectory,
                        opts: SolverOptions | None = None, enforce_floor=True, max_iter=None, epsilon=None):
    """Successive convex approximation for the trajectory with ``plan`` fixed.

    The trace holds the exact objective after each accepted iterate. A step whose
    exact objective falls below the incumbent is discarded and the loop stops.
    """
    opts = opts or solver_options(scenario)
    max_iter = scenario.solver.max_sca if max_iter is None else max_iter
    eps = scenario.solver.epsilon if epsilon is None else epsilon
    traj = init_traj
    best = true_objective(scenario, plan, traj)
    trace = [best]
    steps = 0
    converged = False
    for it in range(1, max_iter + 1):
        local = init_local_point(scenario, traj)
        prog, layout = build_trajectory_subproblem(scenario, plan, local, enforce_floor=enforce_floor)
        rep = solve(prog, opts, x0=layout.start)
        steps += rep.newton_steps
        if rep.status is Status.INFEASIBLE:
            raise InfeasibleError(f"trajectory subproblem infeasible at SCA iteration {it}: {rep.message}",
                                  detail={"iteration": it, "constraint": rep.worst_constraint}, report=rep)
        if not rep.ok:
            raise SolverFailure(f"trajectory subproblem failed at SCA iteration {it}: {rep.status.value} {rep.message}",
                                report=rep)
        cand = layout_trajectory(scenario, layout, rep.x)
        value = true_objective(scenario, plan, cand)
        log.debug("SCA iteration %d: objective %.9g (surrogate %.9g)", it, value, rep.objective * scenario.total_bandwidth)
        if value < best:
            converged = True
            break
        improvement = value - best
        traj, best = cand, value
        trace.append(value)
        if improvement < eps * max(abs(trace[-2]), 1e-300):
            converged = True
            break
    return ScaResult(traj, best, trace, len(trace) - 1, steps, converged)


def restore_floor_feasibility(scenario: ScenarioConfig, plan: BandwidthPlan, init_traj: Trajectory,
                              opts: SolverOptions | None = None, max_iter=10):
    """Move the UAV to shrink the largest rate-floor shortfall under ``plan``."""
    opts = opts or solver_options(scenario)
    traj = init_traj
    for _ in range(max_iter):
        local = init_local_point(scenario, traj)
        prog, layout = build_trajectory_subproblem(scenario, plan, local, elastic=True)
        rep = solve(prog, opts, x0=layout.start)
        if not rep.ok:
            break
        new = layout_trajectory(scenario, layout, rep.x)
        moved = np.max(np.abs(new.xy - traj.xy))
        traj = new
        if rep.x[-1] <= 0 or moved < 1e-3:
            break
    return traj


def per_vehicle_average(scenario: ScenarioConfig, plan: BandwidthPlan, traj: Trajectory) -> np.ndarray:
    return average_rates(scenario, plan.kappa, traj)


def true_backhaul_load(scenario: ScenarioConfig, plan: BandwidthPlan, traj: Trajectory):
    from .bandwidth import rate_coefficients

    load = np.sum(np.asarray(plan.kappa) * rate_coefficients(scenario, traj), axis=0)
    return load, backhaul_rates(scenario, traj)
