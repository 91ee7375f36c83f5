import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from uavnet import convex
from uavnet.convex import ConvexProgram, SolverOptions, Status, check_convexity, check_derivatives, find_feasible_point, solve

from .oracles import lp_vertex_max


def lp_program(c, A, b, bounds):
    prog = ConvexProgram()
    lo = [-np.inf if l is None else l for l, _ in bounds]
    hi = [np.inf if h is None else h for _, h in bounds]
    x = prog.add_variables("x", len(c), lower=lo, upper=hi)
    prog.maximize(x, c)
    for i, (row, rhs) in enumerate(zip(A, b)):
        prog.add_linear(x, row, rhs, name=f"row {i}")
    return prog, x


def test_box_phase_one():
    prog = ConvexProgram()
    x = prog.add_variables("x")
    prog.add_linear(x, 1.0, 1.0)
    prog.add_linear(x, -1.0, 1.0)
    rep = find_feasible_point(prog)
    assert rep.ok and -1 < rep.x[0] < 1


def test_empty_intersection_is_infeasible_and_named():
    prog = ConvexProgram()
    x = prog.add_variables("x")
    prog.add_linear(x, 1.0, -1.0, name="upper cap")
    prog.add_linear(x, -1.0, -1.0, name="lower cap")
    rep = solve(prog)
    assert rep.status is Status.INFEASIBLE
    assert rep.worst_constraint in {"upper cap", "lower cap"}
    assert rep.max_violation > 0


def test_simplex_phase_one_is_strictly_interior():
    prog = ConvexProgram()
    k = prog.add_variables("kappa", 5, lower=0.0)
    prog.add_linear(k, np.ones(5), 1.0, name="simplex")
    rep = find_feasible_point(prog)
    assert rep.ok
    assert np.all(rep.x > 0) and rep.x.sum() < 1
    # symmetric problem, symmetric start: the phase-I point is symmetric too
    np.testing.assert_allclose(rep.x, rep.x[0], rtol=1e-9)


def test_min_of_two_bounds():
    prog = ConvexProgram()
    eta = prog.add_variables("eta")
    prog.maximize(eta, 1.0)
    prog.add_linear(eta, 1.0, 3.0)
    prog.add_linear(eta, 1.0, 5.0)
    rep = solve(prog)
    assert rep.ok
    assert rep.objective == pytest.approx(3.0, abs=1e-7)


def test_simplex_lp_puts_mass_on_the_best_coordinate():
    c = np.array([0.3, 1.7, 0.9, 1.2, 0.1])
    prog = ConvexProgram()
    k = prog.add_variables("kappa", 5, lower=0.0)
    prog.add_linear(k, np.ones(5), 1.0)
    prog.maximize(k, c)
    rep = solve(prog)
    assert rep.ok
    assert np.argmax(rep.x) == 1
    assert rep.x[1] == pytest.approx(1.0, abs=1e-6)
    assert rep.objective == pytest.approx(1.7, abs=1e-7)


def random_lp(rng, n=6, m=8):
    # rows through a box with the origin strictly inside keep the LP feasible and bounded
    A = rng.normal(size=(m, n))
    b = rng.uniform(0.5, 3.0, size=m)
    bounds = [(-4.0, 4.0)] * n
    c = rng.normal(size=n)
    return c, A, b, bounds


@pytest.mark.parametrize("seed", range(12))
def test_random_lp_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, m = 6, int(rng.integers(2, 9))
    c, A, b, bounds = random_lp(rng, n, m)
    # the oracle sees every row, box rows included, so the total stays small enough to enumerate
    best = lp_vertex_max(c, A, b, bounds)
    prog, _ = lp_program(c, A, b, bounds)
    rep = solve(prog)
    assert rep.ok
    assert abs(rep.objective - best) <= 1e-6 * max(1.0, abs(best))
    assert rep.max_violation <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(1, 10))
def test_random_lp_matches_linprog(seed, n, m):
    rng = np.random.default_rng(seed)
    c, A, b, bounds = random_lp(rng, n, m)
    ref = linprog(-c, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    prog, _ = lp_program(c, A, b, bounds)
    rep = solve(prog)
    assert rep.ok
    assert rep.objective == pytest.approx(-ref.fun, rel=1e-6, abs=1e-6)


def test_quadratic_block_projection():
    # maximize x + y inside the unit disc centred at (1, 2): optimum (1,2) + (1,1)/sqrt(2)
    prog = ConvexProgram()
    v = prog.add_variables("v", 2)
    prog.maximize(v, [1.0, 1.0])
    prog.add_quadratic([v], np.eye(2), [-1.0, -2.0], [0.0, 0.0], 1.0, "disc")
    rep = solve(prog)
    assert rep.ok
    np.testing.assert_allclose(rep.x, [1 + 2 ** -0.5, 2 + 2 ** -0.5], atol=1e-6)


def test_soc_block_epigraph():
    # minimise s with ||(x - 3, y + 4)|| <= s and x, y free: s* = 0 at (3, -4)
    prog = ConvexProgram()
    v = prog.add_variables("v", 2)
    s = prog.add_variables("s")
    prog.maximize(s, -1.0)
    prog.add_soc([[v[0], v[1], s]], [[1, 0, 0], [0, 1, 0]], [-3.0, 4.0], [0, 0, 1.0], 0.0, "cone")
    prog.add_linear(v[0], 1.0, 2.0, name="x cap")  # pushes the optimum to distance 1
    rep = solve(prog)
    assert rep.ok
    assert rep.objective == pytest.approx(-1.0, abs=1e-6)
    np.testing.assert_allclose(rep.x[:2], [2.0, -4.0], atol=1e-5)


def inverse_fn(X):
    # 1/x - y <= 0 on x > 0, convex
    x, y = X[:, 0], X[:, 1]
    with np.errstate(divide="ignore"):
        g = np.where(x > 0, 1.0 / x - y, np.inf)
    grad = np.stack([-1.0 / x ** 2, -np.ones_like(x)], axis=1)
    hess = np.zeros((len(x), 2, 2))
    hess[:, 0, 0] = 2.0 / x ** 3
    return g, grad, hess


def test_smooth_block_hyperbola():
    # minimise x + y with y >= 1/x: optimum x = y = 1
    prog = ConvexProgram()
    v = prog.add_variables("v", 2)
    prog.maximize(v, [-1.0, -1.0])
    prog.add_smooth([v], inverse_fn, "hyperbola")
    rep = solve(prog, x0=[2.0, 2.0])
    assert rep.ok
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-4)
    assert rep.objective == pytest.approx(-2.0, abs=1e-7)


def test_derivative_check_catches_a_wrong_gradient():
    def wrong(X):
        g, grad, hess = inverse_fn(X)
        return g, 2 * grad, hess

    prog = ConvexProgram()
    v = prog.add_variables("v", 2)
    prog.add_smooth([v], inverse_fn, "good")
    check_derivatives(prog, [1.5, 3.0])
    bad = ConvexProgram()
    v = bad.add_variables("v", 2)
    bad.add_smooth([v], wrong, "bad row")
    with pytest.raises(AssertionError, match="bad row"):
        check_derivatives(bad, [1.5, 3.0])


def test_convexity_check_catches_a_concave_row():
    def concave(X):
        x = X[:, 0]
        return -x ** 2, (-2 * x)[:, None], np.full((len(x), 1, 1), -2.0)

    prog = ConvexProgram()
    v = prog.add_variables("v")
    prog.add_smooth([[v]], concave, "concave row")
    pts = np.linspace(-3, 3, 20)[:, None]
    with pytest.raises(AssertionError, match="concave row"):
        check_convexity(prog, pts, np.random.default_rng(0), pairs=200)


def test_debug_mode_runs_the_cross_check():
    prog = ConvexProgram()
    v = prog.add_variables("v", 2)
    prog.maximize(v, [-1.0, -1.0])
    prog.add_smooth([v], inverse_fn, "hyperbola")
    assert solve(prog, SolverOptions(debug_checks=True), x0=[2.0, 2.0]).ok


def test_iteration_limit_reported():
    c, A, b, bounds = random_lp(np.random.default_rng(1))
    prog, _ = lp_program(c, A, b, bounds)
    rep = solve(prog, SolverOptions(max_newton=3))
    assert rep.status is Status.ITERATION_LIMIT


def test_solver_is_deterministic():
    c, A, b, bounds = random_lp(np.random.default_rng(4))
    r1 = solve(lp_program(c, A, b, bounds)[0])
    r2 = solve(lp_program(c, A, b, bounds)[0])
    assert r1.objective == r2.objective
    np.testing.assert_array_equal(r1.x, r2.x)
    assert r1.newton_steps == r2.newton_steps


def test_maximize_and_minimize_negated_agree():
    c, A, b, bounds = random_lp(np.random.default_rng(9))
    direct = solve(lp_program(c, A, b, bounds)[0])
    # minimise w subject to w >= (-c).x, written as maximise -w
    prog, x = lp_program(np.zeros(len(c)), A, b, bounds)
    w = prog.add_variables("w")
    prog.maximize(w, -1.0)
    prog.add_linear(np.append(x, w), np.append(-c, -1.0), 0.0)
    other = solve(prog)
    assert direct.ok and other.ok
    assert other.objective == pytest.approx(direct.objective, abs=1e-6)
    np.testing.assert_allclose(other.x[:-1], direct.x, atol=1e-5)


def test_iterates_stay_interior_and_merit_descends(monkeypatch):
    seen = []
    original = convex._line_search

    def recording(cp, z, dz, t, w, gdz, opts):
        step = original(cp, z, dz, t, w, gdz, opts)
        s0, s1 = cp.slacks(z), cp.slacks(z + step * dz)
        merit = lambda zz, s: t * float(w @ zz) - float(np.sum(np.log(s)))
        seen.append((np.all(s1 > 0), merit(z + step * dz, s1) - merit(z, s0), merit(z, s0)))
        return step

    monkeypatch.setattr(convex, "_line_search", recording)
    prog = ConvexProgram()
    v = prog.add_variables("v", 2, lower=0.0)
    prog.maximize(v, [1.0, 2.0])
    prog.add_quadratic([v], np.eye(2), [0.0, 0.0], [0.0, 0.0], 4.0, "disc")
    prog.add_linear(v, [1.0, 3.0], 5.0)
    rep = solve(prog, x0=[0.5, 0.5])
    assert rep.ok and seen
    for interior, change, level in seen:
        assert interior
        assert change <= 1e-12 * (1 + abs(level))
