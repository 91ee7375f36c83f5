import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavnet.bandwidth import BandwidthPlan, InfeasibleError, equal_split
from uavnet.convex import Status, solve
from uavnet.link import (
    Trajectory, induced_power_factor, max_speed_under_power, propulsion_plus_comm_power, uav_speed_profile,
)
from uavnet.scenario import default_scenario
from uavnet.trajectory import (
    KM, build_trajectory_subproblem, hover_trajectory, init_local_point, initial_trajectory, layout_trajectory,
    linearize_power_rhs, linearize_rate, linearized_objective, linearized_rate_value, optimize_trajectory,
    squared_distances, true_objective,
)

from . import oracles
from .helpers import tiny_scenario


def test_linearize_rate_unit_example():
    alpha, phi = linearize_rate(1.0, 1.0)
    assert alpha == pytest.approx(1.0, rel=1e-15)
    assert phi == pytest.approx(0.72135, abs=5e-6)
    assert phi == pytest.approx(float(oracles.mp.log(oracles.mp.e, 2) / 2), rel=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-6, 1e6), st.floats(1e-6, 1e6))
def test_rate_tangent_is_exact_at_the_expansion_point(t_r, a):
    assert linearized_rate_value(t_r, t_r, a) == pytest.approx(math.log2(1 + a / t_r), rel=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-4, 1e4), st.floats(1e-4, 1e4), st.floats(1e-4, 1e4))
def test_rate_tangent_is_a_global_lower_bound(t_r, a, t):
    alpha, phi = linearize_rate(t_r, a)
    assert phi > 0 and alpha > 0
    true = float(oracles.mp.log(1 + oracles.mp.mpf(a) / t, 2))
    assert linearized_rate_value(t, t_r, a) <= true + 1e-12 * (1 + abs(true))


def power_bound(D, S, D_r, S_r, s0=5.4):
    cD, cS, c = linearize_power_rhs(D_r, S_r, s0)
    return cD * D + cS * S + c


def test_power_minorant_examples():
    for D in (0.0, 0.5, 1.0, 2.0):
        assert power_bound(D, 7.0, 1.0, 0.0) == pytest.approx(2 * D - 1)
    assert power_bound(1.0, 0.0, 1.0, 0.0) == 1.0
    assert power_bound(3.0, 20.0, 0.0, 0.0) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 2), st.floats(0, 60), st.floats(0, 2), st.floats(0, 60))
def test_power_minorant_is_below_the_sum_of_squares(D_r, S_r, D, S):
    true = D * D + S * S / 5.4 ** 2
    assert power_bound(D, S, D_r, S_r) <= true + 1e-12 * (1 + true)
    assert power_bound(D_r, S_r, D_r, S_r) == pytest.approx(D_r ** 2 + S_r ** 2 / 5.4 ** 2, rel=1e-12, abs=1e-15)


def test_local_point_on_hover_and_cruise():
    scn = default_scenario()
    hover = hover_trajectory(scn, scn.uav_initial_xy)
    np.testing.assert_array_equal(init_local_point(scn, hover).D, 1.0)
    traj = initial_trajectory(scn, speed=30.0)
    local = init_local_point(scn, traj)
    cruising = traj.xy[1:, 0] < scn.road_length  # the line reaches the road end and stops there
    np.testing.assert_allclose(local.speed[cruising], 30.0, rtol=1e-12)
    np.testing.assert_allclose(local.D[cruising], float(oracles.induced_factor(30.0, 5.4)), rtol=1e-12)
    # auxiliaries hold with equality at initialisation
    np.testing.assert_allclose(local.t_v, squared_distances(scn, traj.xy), rtol=0)
    np.testing.assert_allclose(1 / local.D ** 2, local.D ** 2 + local.speed ** 2 / 5.4 ** 2, rtol=1e-10)
    assert np.all(local.t_v >= scn.uav_altitude ** 2)


def test_initial_trajectory_is_feasible():
    scn = default_scenario()
    traj = initial_trajectory(scn)
    speed = uav_speed_profile(traj, scn.slot_length)
    assert speed.max() <= scn.uav_max_speed
    assert np.all(propulsion_plus_comm_power(speed, scn.power_model, scn.total_comm_power) <= scn.power_budget)
    np.testing.assert_array_equal(traj.xy[0], scn.uav_initial_xy)
    assert np.all(traj.xy[:, 0] <= scn.road_length) and np.all((traj.xy[:, 1] >= 0) & (traj.xy[:, 1] <= scn.road_width))
    assert speed[0] == pytest.approx(25.0)


def test_zero_iteration_objective_matches_the_true_one():
    scn = default_scenario()
    traj = initial_trajectory(scn)
    plan = BandwidthPlan(equal_split(scn), 0.0)
    local = init_local_point(scn, traj)
    assert linearized_objective(scn, plan, local, local.t_v) == pytest.approx(true_objective(scn, plan, traj), rel=1e-12)


def single_vehicle(x0=1500.0, speed=30.0):
    return tiny_scenario([(speed, 12.5, x0)])


def grid_best(scn, plan, step=0.1):
    """Best slot-1 position on a grid around the start, honouring speed, power and the box.

    A 1 m lattice cannot resolve the reach circle (the best lattice point sits almost a
    meter inside it, where the objective is flat in y), so the grid is 0.1 m.
    """
    cap = min(scn.uav_max_speed, max_speed_under_power(scn.power_model, scn.total_comm_power, scn.power_budget))
    reach = cap * scn.slot_length
    x0, y0 = scn.uav_initial_xy
    xs = np.arange(max(0.0, math.floor(x0 - reach)), math.ceil(x0 + reach) + step, step)
    ys = np.arange(0.0, scn.road_width + step / 2, step)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    ok = (np.hypot(X - x0, Y - y0) <= reach) & (X >= 0) & (X <= scn.road_length)
    pv = scn.vehicle_positions()[0, 0]
    d2 = (X - pv[0]) ** 2 + (Y - pv[1]) ** 2 + scn.uav_altitude ** 2
    val = np.where(ok, -d2, -np.inf)  # rate is decreasing in distance
    i, j = np.unravel_index(np.argmax(val), val.shape)
    return np.array([X[i, j], Y[i, j]]), float(d2[i, j])


def test_one_slot_toy_matches_grid_search():
    scn = single_vehicle()
    plan = BandwidthPlan(np.ones((1, 1)), 0.0)
    init = Trajectory(np.tile(scn.uav_initial_xy, (2, 1)), scn.uav_altitude)
    res = optimize_trajectory(scn, plan, init, epsilon=1e-9)
    best, best_d2 = grid_best(scn, plan)
    assert np.linalg.norm(res.trajectory.xy[1] - best) <= 5.0
    assert squared_distances(scn, res.trajectory.xy)[0, 0] <= best_d2 * (1 + 1e-9)
    # the UAV flies the full power-capped step toward the vehicle
    cap = max_speed_under_power(scn.power_model, scn.total_comm_power, scn.power_budget)
    assert np.linalg.norm(res.trajectory.xy[1] - res.trajectory.xy[0]) == pytest.approx(cap * scn.slot_length, rel=1e-3)


def test_hover_optimum_is_a_fixed_point():
    scn = tiny_scenario([(30, 25, 0)], uav_initial_xy=(120.0, 25.0))
    plan = BandwidthPlan(np.ones((1, 1)), 0.0)
    init = Trajectory([[120.0, 25.0], [120.0, 25.0]], scn.uav_altitude)
    res = optimize_trajectory(scn, plan, init)
    assert res.iterations <= 1
    assert res.eta == pytest.approx(res.trace[0], rel=1e-9)
    np.testing.assert_allclose(res.trajectory.xy[1], [120.0, 25.0], atol=1e-3)


def test_unreachable_floor_names_a_22c_row():
    scn = tiny_scenario([(30, 12.5, 1000), (39, 25, 1000, 1e7)], slot_count=2)
    plan = BandwidthPlan(np.array([[0.9, 0.9], [0.01, 0.01]]), 0.0)
    init = Trajectory(np.tile(scn.uav_initial_xy, (3, 1)), scn.uav_altitude)
    prog, layout = build_trajectory_subproblem(scn, plan, init_local_point(scn, init))
    rep = solve(prog, x0=layout.start)
    assert rep.status is Status.INFEASIBLE
    assert "(22c)" in rep.worst_constraint
    with pytest.raises(InfeasibleError) as info:
        optimize_trajectory(scn, plan, init)
    assert info.value.detail["iteration"] == 1
    assert "(22c)" in info.value.detail["constraint"]


@pytest.fixture(scope="module")
def equal_plan_run():
    scn = default_scenario()
    plan = BandwidthPlan(equal_split(scn), 0.0)
    init = initial_trajectory(scn)
    return scn, plan, init, optimize_trajectory(scn, plan, init, max_iter=8)


def test_default_scenario_trace_improves(equal_plan_run):
    scn, plan, init, res = equal_plan_run
    trace = res.trace
    assert trace[0] == pytest.approx(true_objective(scn, plan, init), rel=1e-12)
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(trace, trace[1:]))
    assert res.eta > trace[0]


def test_returned_trajectory_respects_mobility_power_and_box(equal_plan_run):
    scn, _, _, res = equal_plan_run
    xy = res.trajectory.xy
    speed = uav_speed_profile(xy, scn.slot_length)
    np.testing.assert_array_equal(xy[0], scn.uav_initial_xy)
    assert np.all(speed <= scn.uav_max_speed * (1 + 1e-9))
    power = propulsion_plus_comm_power(speed, scn.power_model, scn.total_comm_power)
    assert np.all(power <= scn.power_budget + 1e-6)
    assert np.all((xy[:, 0] >= 0) & (xy[:, 0] <= scn.road_length))
    assert np.all((xy[:, 1] >= 0) & (xy[:, 1] <= scn.road_width))


def test_tightening_auxiliaries_never_lowers_the_objective(equal_plan_run):
    scn, plan, _, res = equal_plan_run
    local = init_local_point(scn, res.trajectory)
    prog, layout = build_trajectory_subproblem(scn, plan, local)
    rep = solve(prog, x0=layout.start)
    assert rep.ok
    cand = layout_trajectory(scn, layout, rep.x)
    surrogate = rep.objective * scn.total_bandwidth
    assert true_objective(scn, plan, cand) >= surrogate * (1 - 1e-9)
    # the tangent bound at the solution's own squared distances is below the exact value too
    t_exact = squared_distances(scn, cand.xy)
    assert linearized_objective(scn, plan, local, t_exact) <= true_objective(scn, plan, cand) * (1 + 1e-12)
    # power: the solver's D and s certify the true power constraint
    D = rep.x[layout.D]
    s = rep.x[layout.s]
    true_speed = uav_speed_profile(cand, scn.slot_length)
    assert np.all(true_speed <= s * (1 + 1e-9) + 1e-9)
    assert np.all(induced_power_factor(true_speed, 5.4) <= D + 1e-9)


def test_sca_is_deterministic():
    scn = single_vehicle()
    plan = BandwidthPlan(np.ones((1, 1)), 0.0)
    init = Trajectory(np.tile(scn.uav_initial_xy, (2, 1)), scn.uav_altitude)
    a = optimize_trajectory(scn, plan, init)
    b = optimize_trajectory(scn, plan, init)
    np.testing.assert_array_equal(a.trajectory.xy, b.trajectory.xy)
    assert a.trace == b.trace


def test_km_scaling_constant():
    assert KM == 1000.0
