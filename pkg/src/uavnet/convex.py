"""Small dense primal log-barrier interior-point solver.

Programs are posed as ``maximize c.x`` subject to blocks of constraints:

* linear rows ``a.x <= b`` (variable bounds are folded in as linear rows),
* convex quadratics ``||M x + q||^2 <= a.x + b``,
* second-order cones ``||M x + q|| <= a.x + b``,
* smooth scalar constraints ``g(x) <= 0`` with caller-supplied derivatives.

Each nonlinear block has a fixed number ``k`` of participating variables per
row so values, gradients and Hessians are evaluated for the whole block at once.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

log = logging.getLogger(__name__)


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class SolverOptions:
    barrier_mu: float = 10.0
    initial_t: float = 1.0
    feas_tol: float = 1e-9
    gap_tol: float = 1e-8
    newton_tol: float = 1e-10
    stall_tol: float = 1e-5  # decrement accepted once Newton stops making progress
    stall_steps: int = 10
    max_newton: int = 3000
    ls_alpha: float = 0.25
    ls_beta: float = 0.5
    reg_start: float = 1e-10
    reg_max: float = 1e-2
    debug_checks: bool = False


@dataclass
class SolveReport:
    status: Status
    x: np.ndarray
    objective: float
    max_violation: float
    outer_iterations: int = 0
    newton_steps: int = 0
    phase1_steps: int = 0
    message: str = ""
    worst_constraint: str | None = None
    gap: float = float("inf")
    barrier_t: float = float("nan")  # final barrier weight; row multipliers are 1/(t*slack)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


class _NumericalFailure(Exception):
    pass


@dataclass
class _Block:
    kind: str  # "quad", "soc" or "smooth"
    idx: np.ndarray
    names: list
    M: np.ndarray | None = None
    q: np.ndarray | None = None
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    fn: object = None


@dataclass
class ConvexProgram:
    """Declarative convex program: ``maximize c.x`` subject to constraint blocks."""

    var_names: list = field(default_factory=list)
    lower: list = field(default_factory=list)
    upper: list = field(default_factory=list)
    objective: dict = field(default_factory=dict)
    _lin_rows: list = field(default_factory=list)
    _lin_cols: list = field(default_factory=list)
    _lin_vals: list = field(default_factory=list)
    _lin_rhs: list = field(default_factory=list)
    _lin_names: list = field(default_factory=list)
    blocks: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.var_names)

    @property
    def linear_count(self) -> int:
        return len(self._lin_rhs)

    def add_variables(self, name, count=None, lower=-np.inf, upper=np.inf):
        """Add one variable (``count=None``) or a vector of ``count``; returns index/indices."""
        start = self.n
        size = 1 if count is None else int(count)
        lo = np.broadcast_to(np.asarray(lower, dtype=float), (size,))
        hi = np.broadcast_to(np.asarray(upper, dtype=float), (size,))
        for i in range(size):
            self.var_names.append(name if count is None else f"{name}[{i}]")
            self.lower.append(float(lo[i]))
            self.upper.append(float(hi[i]))
        if count is None:
            return start
        return np.arange(start, start + size)

    def maximize(self, idx, coeffs):
        idx = np.atleast_1d(idx)
        coeffs = np.broadcast_to(np.asarray(coeffs, dtype=float), idx.shape)
        for i, c in zip(idx, coeffs):
            self.objective[int(i)] = self.objective.get(int(i), 0.0) + float(c)

    def add_linear(self, idx, coeffs, rhs, name="linear"):
        """One row ``sum coeffs*x[idx] <= rhs``."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        coeffs = np.broadcast_to(np.asarray(coeffs, dtype=float), idx.shape)
        row = len(self._lin_rhs)
        self._lin_rows.append(np.full(idx.size, row))
        self._lin_cols.append(idx)
        self._lin_vals.append(np.array(coeffs))
        self._lin_rhs.append(float(rhs))
        self._lin_names.append(name)

    def add_linear_rows(self, idx, coeffs, rhs, names):
        """Vectorised rows: ``idx``/``coeffs`` are (m, k), ``rhs`` is (m,)."""
        idx = np.asarray(idx, dtype=int)
        coeffs = np.broadcast_to(np.asarray(coeffs, dtype=float), idx.shape)
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), idx.shape[:1])
        m, k = idx.shape
        start = len(self._lin_rhs)
        self._lin_rows.append(np.repeat(np.arange(start, start + m), k))
        self._lin_cols.append(idx.ravel())
        self._lin_vals.append(np.array(coeffs).ravel())
        self._lin_rhs.extend(float(v) for v in rhs)
        self._lin_names.extend(_expand_names(names, m))

    def add_quadratic(self, idx, M, q, a, b, names):
        """Rows ``||M_i x[idx_i] + q_i||^2 <= a_i.x[idx_i] + b_i``."""
        self._add_block("quad", idx, M, q, a, b, names)

    def add_soc(self, idx, M, q, a, b, names):
        """Rows ``||M_i x[idx_i] + q_i|| <= a_i.x[idx_i] + b_i``."""
        self._add_block("soc", idx, M, q, a, b, names)

    def _add_block(self, kind, idx, M, q, a, b, names):
        idx = np.atleast_2d(np.asarray(idx, dtype=int))
        m, k = idx.shape
        M = np.asarray(M, dtype=float).reshape(m, -1, k)
        self.blocks.append(_Block(
            kind, idx, _expand_names(names, m), M=M,
            q=np.asarray(q, dtype=float).reshape(m, M.shape[1]),
            a=np.asarray(a, dtype=float).reshape(m, k),
            b=np.asarray(b, dtype=float).reshape(m),
        ))

    def add_smooth(self, idx, fn, names):
        """Rows ``g_i(x[idx_i]) <= 0``.

        ``fn(X)`` takes the (m, k) gathered values and returns ``(g, grad, hess)`` with
        shapes (m,), (m, k), (m, k, k). It must return ``inf`` for points outside its
        domain and must be convex on the domain.
        """
        idx = np.atleast_2d(np.asarray(idx, dtype=int))
        self.blocks.append(_Block("smooth", idx, _expand_names(names, idx.shape[0]), fn=fn))

    def constraint_count(self) -> int:
        bounds = sum(np.isfinite(v) for v in self.lower) + sum(np.isfinite(v) for v in self.upper)
        return self.linear_count + int(bounds) + sum(b.idx.shape[0] for b in self.blocks)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n)
        for i, v in self.objective.items():
            c[i] = v
        return c

    def violations(self, x) -> np.ndarray:
        """Per-row values g_i(x) (positive means violated), in compiled row order."""
        return _Compiled(self, phase1=False).values(np.asarray(x, dtype=float))

    def row_names(self) -> list:
        return _Compiled(self, phase1=False).names


def _expand_names(names, m):
    if isinstance(names, str):
        return [names] * m if m == 1 else [f"{names}[{i}]" for i in range(m)]
    names = list(names)
    if len(names) != m:
        raise ValueError("one name per row required")
    return names



class _Compiled:
    """Evaluation machinery; with ``phase1`` an extra last variable shifts every row.

    ``anchor`` (phase I only) adds unshifted rows ``|x_i - anchor_i| <= radius`` on
    every side where a variable has no finite bound, so the centering problems stay
    bounded even when the phase-I objective leaves some directions free.
    """

    def __init__(self, prog: ConvexProgram, phase1: bool, anchor=None):
        n = prog.n
        self.n = n + (1 if phase1 else 0)
        self.phase1 = phase1
        rows = list(prog._lin_rows)
        cols = list(prog._lin_cols)
        vals = list(prog._lin_vals)
        rhs = list(prog._lin_rhs)
        names = list(prog._lin_names)
        next_row = len(rhs)
        for i, (lo, hi) in enumerate(zip(prog.lower, prog.upper)):
            if np.isfinite(lo):
                rows.append(np.array([next_row]))
                cols.append(np.array([i]))
                vals.append(np.array([-1.0]))
                rhs.append(-lo)
                names.append(f"{prog.var_names[i]} >= lower")
                next_row += 1
            if np.isfinite(hi):
                rows.append(np.array([next_row]))
                cols.append(np.array([i]))
                vals.append(np.array([1.0]))
                rhs.append(hi)
                names.append(f"{prog.var_names[i]} <= upper")
                next_row += 1
        m_lin = len(rhs)
        if phase1 and m_lin:
            rows.append(np.arange(m_lin))
            cols.append(np.full(m_lin, n))
            vals.append(-np.ones(m_lin))
        if phase1 and anchor is not None:
            radius = 1e3 * (1.0 + float(np.max(np.abs(anchor), initial=0.0)))
            for i, (lo, hi) in enumerate(zip(prog.lower, prog.upper)):
                for sign, bound in ((-1.0, lo), (1.0, hi)):
                    if np.isfinite(bound):
                        continue
                    rows.append(np.array([len(rhs)]))
                    cols.append(np.array([i]))
                    vals.append(np.array([sign]))
                    rhs.append(radius + sign * anchor[i])
                    names.append(f"{prog.var_names[i]} phase-I anchor")
        if rows:
            A = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(rhs), self.n)
            ).tocsr()
        else:
            A = sp.csr_matrix((len(rhs), self.n))
        self.A = A
        self.AT = A.T.tocsr()
        self.b = np.asarray(rhs, dtype=float)
        self.blocks = []
        for blk in prog.blocks:
            names.extend(blk.names)
            if not phase1:
                self.blocks.append(blk)
                continue
            m, k = blk.idx.shape
            idx = np.hstack([blk.idx, np.full((m, 1), n)])
            if blk.kind == "smooth":
                self.blocks.append(_Block("smooth", idx, blk.names, fn=_shifted(blk.fn)))
            else:
                M = np.concatenate([blk.M, np.zeros(blk.M.shape[:2] + (1,))], axis=2)
                a = np.hstack([blk.a, np.ones((m, 1))])
                self.blocks.append(_Block(blk.kind, idx, blk.names, M=M, q=blk.q, a=a, b=blk.b))
        self.names = names
        self.theta = len(rhs) + sum((2 if blk.kind == "soc" else 1) * blk.idx.shape[0] for blk in self.blocks)

    # -- evaluation ---------------------------------------------------------
    def _block_eval(self, blk, z, derivs):
        X = z[blk.idx]
        if blk.kind == "smooth":
            g, G, H = blk.fn(X)
            g = np.asarray(g, dtype=float)
            return g, (G, H) if derivs else None
        y = np.einsum("mrk,mk->mr", blk.M, X) + blk.q
        u = np.einsum("mk,mk->m", blk.a, X) + blk.b
        if blk.kind == "quad":
            g = np.einsum("mr,mr->m", y, y) - u
            if not derivs:
                return g, None
            G = 2.0 * np.einsum("mrk,mr->mk", blk.M, y) - blk.a
            H = 2.0 * np.einsum("mrk,mrl->mkl", blk.M, blk.M)
            return g, (G, H)
        # soc: slack f = u^2 - ||y||^2 with u > 0
        ny2 = np.einsum("mr,mr->m", y, y)
        f = np.where(u > 0, u * u - ny2, -np.inf)
        if not derivs:
            return f, None
        G = 2.0 * u[:, None] * blk.a - 2.0 * np.einsum("mrk,mr->mk", blk.M, y)
        H = 2.0 * blk.a[:, :, None] * blk.a[:, None, :] - 2.0 * np.einsum("mrk,mrl->mkl", blk.M, blk.M)
        return f, (G, H)

    def slacks(self, z):
        """Positive slacks for every barrier term (nan/<=0 means out of domain)."""
        parts = [self.b - self.A @ z]
        for blk in self.blocks:
            v, _ = self._block_eval(blk, z, False)
            parts.append(v if blk.kind == "soc" else -v)
        return np.concatenate(parts) if parts else np.zeros(0)

    def values(self, z):
        """Constraint values g_i(z) <= 0 convention (soc reported as ||y|| - u)."""
        parts = [self.A @ z - self.b]
        for blk in self.blocks:
            if blk.kind == "soc":
                X = z[blk.idx]
                y = np.einsum("mrk,mk->mr", blk.M, X) + blk.q
                u = np.einsum("mk,mk->m", blk.a, X) + blk.b
                parts.append(np.sqrt(np.einsum("mr,mr->m", y, y)) - u)
            else:
                parts.append(self._block_eval(blk, z, False)[0])
        return np.concatenate(parts)

    def in_domain(self, z) -> bool:
        s = self.slacks(z)
        return bool(np.all(s > 0) and np.all(np.isfinite(s)))

    def barrier_derivs(self, z):
        """Gradient and dense Hessian of the log barrier at a strictly feasible z."""
        N = self.n
        r = self.b - self.A @ z
        inv = 1.0 / r
        grad = self.AT @ inv
        H_lin = (self.AT @ sp.diags(inv * inv) @ self.A).tocoo()
        flat = [H_lin.row * N + H_lin.col]
        weights = [H_lin.data]
        for blk in self.blocks:
            v, (G, Hb) = self._block_eval(blk, z, True)
            if blk.kind == "soc":
                s = v  # barrier -log f
                Gl = -G / s[:, None]
                Hl = G[:, :, None] * G[:, None, :] / (s * s)[:, None, None] - Hb / s[:, None, None]
            else:
                s = -v  # barrier -log(-g)
                Gl = G / s[:, None]
                Hl = G[:, :, None] * G[:, None, :] / (s * s)[:, None, None] + Hb / s[:, None, None]
            np.add.at(grad, blk.idx, Gl)
            k = blk.idx.shape[1]
            ri = np.repeat(blk.idx, k, axis=1)
            ci = np.tile(blk.idx, (1, k))
            flat.append((ri * N + ci).ravel())
            weights.append(Hl.reshape(-1))
        H = np.bincount(np.concatenate(flat), weights=np.concatenate(weights), minlength=N * N).reshape(N, N)
        return grad, H


def _shifted(fn):
    def wrapped(X):
        g, G, H = fn(X[:, :-1])
        m, k = G.shape
        G2 = np.hstack([G, -np.ones((m, 1))])
        H2 = np.zeros((m, k + 1, k + 1))
        H2[:, :k, :k] = H
        return np.asarray(g) - X[:, -1], G2, H2

    return wrapped


def _newton_direction(H, g, opts):
    d = np.sqrt(np.abs(np.diag(H)))
    d[d == 0] = 1.0
    Hs = H / d[:, None] / d[None, :]
    gs = g / d
    lam = 0.0
    while True:
        try:
            cf = scipy.linalg.cho_factor(Hs + lam * np.eye(len(d)) if lam else Hs, lower=True, check_finite=False)
            y = scipy.linalg.cho_solve(cf, -gs, check_finite=False)
            if np.all(np.isfinite(y)):
                break
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            pass
        lam = opts.reg_start if lam == 0.0 else lam * 10.0
        if lam > opts.reg_max:
            raise _NumericalFailure("singular Newton system after regularization")
    dz = y / d
    return dz, float(-g @ dz)


def _line_search(cp, z, dz, t, w, gdz, opts):
    """Backtracking: stay strictly inside, then Armijo on the barrier merit."""
    s_old = cp.slacks(z)
    Adz = cp.A @ dz
    pos = Adz > 0
    step = 1.0
    if np.any(pos):
        r = cp.b - cp.A @ z
        step = min(1.0, 0.99 * float(np.min(r[pos] / Adz[pos])))
    while step > 1e-14:
        zn = z + step * dz
        s_new = cp.slacks(zn)
        if np.all(s_new > 0) and np.all(np.isfinite(s_new)):
            # merit difference evaluated as a sum of log ratios to limit cancellation
            dphi = t * step * float(w @ dz) - float(np.sum(np.log(s_new / s_old)))
            if dphi <= opts.ls_alpha * step * gdz:
                return step
        step *= opts.ls_beta
    return 0.0


def _barrier_method(cp, z, w, opts, newton_budget, stop=None, t0=None):
    """Minimise ``w.z`` over the compiled constraints from a strictly feasible ``z``.

    Returns (status, z, outer_iterations, newton_steps, gap, stopped_early).
    """
    t = opts.initial_t if t0 is None else t0
    outer = 0
    steps = 0
    while True:
        outer += 1
        best, since = np.inf, 0
        while True:
            grad_b, H = cp.barrier_derivs(z)
            g = t * w + grad_b
            dz, lam2 = _newton_direction(H, g, opts)
            if lam2 / 2.0 <= opts.newton_tol:
                break
            # rounding in an ill-conditioned Hessian can leave the decrement hovering
            if lam2 < 0.9 * best:
                best, since = lam2, 0
            else:
                since += 1
                if since >= opts.stall_steps and lam2 / 2.0 <= opts.stall_tol:
                    break
            step = _line_search(cp, z, dz, t, w, -lam2, opts)
            if step * float(np.max(np.abs(dz))) <= 1e-13 * (1.0 + float(np.max(np.abs(z)))):
                break  # no measurable progress left at working precision
            z = z + step * dz
            steps += 1
            if stop is not None and stop(z):
                return Status.OPTIMAL, z, outer, steps, cp.theta / t, True
            if steps >= newton_budget:
                return Status.ITERATION_LIMIT, z, outer, steps, cp.theta / t, False
        gap = cp.theta / t
        if gap <= opts.gap_tol:
            return Status.OPTIMAL, z, outer, steps, gap, False
        t *= opts.barrier_mu


def find_feasible_point(prog: ConvexProgram, x0=None, opts: SolverOptions | None = None):
    """Phase I: minimise a common shift s with g_i(x) <= s until s < 0.

    Returns a SolveReport whose status is OPTIMAL (x strictly feasible) or INFEASIBLE
    (with the most violated row named), or a failure status.
    """
    opts = opts or SolverOptions()
    n = prog.n
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    cp2 = _Compiled(prog, phase1=False)
    if cp2.in_domain(x0):
        return SolveReport(Status.OPTIMAL, x0, float(prog.objective_vector() @ x0),
                           float(np.max(cp2.values(x0), initial=-np.inf)))
    vals = cp2.values(x0)
    if not np.all(np.isfinite(vals)):
        return SolveReport(Status.NUMERICAL_FAILURE, x0, float("nan"), float("inf"),
                           message="phase I start outside a constraint's domain")
    worst = float(np.max(vals))
    cp1 = _Compiled(prog, phase1=True, anchor=x0)
    shift0 = worst + max(1.0, 0.1 * abs(worst))
    z = np.append(x0, shift0)
    w = np.zeros(n + 1)
    w[-1] = 1.0
    # start where the barrier and the shift carry similar weight
    t0 = max(opts.initial_t, cp1.theta / shift0)
    try:
        status, z, outer, steps, gap, early = _barrier_method(
            cp1, z, w, opts, opts.max_newton, t0=t0, stop=lambda zz: zz[-1] < 0 and cp2.in_domain(zz[:-1])
        )
    except _NumericalFailure as exc:
        return SolveReport(Status.NUMERICAL_FAILURE, x0, float("nan"), float("inf"), message=str(exc))
    x = z[:-1]
    vals = cp2.values(x)
    if early or cp2.in_domain(x):
        return SolveReport(Status.OPTIMAL, x, float(prog.objective_vector() @ x), float(np.max(vals, initial=-np.inf)),
                           outer, steps, steps)
    if status is Status.OPTIMAL:
        k = int(np.argmax(vals))
        return SolveReport(Status.INFEASIBLE, x, float("nan"), float(vals[k]), outer, steps, steps,
                           message=f"no strictly feasible point; most violated: {cp2.names[k]}",
                           worst_constraint=cp2.names[k])
    return SolveReport(status, x, float("nan"), float(np.max(vals)), outer, steps, steps,
                       message="phase I did not finish")


def solve(prog: ConvexProgram, opts: SolverOptions | None = None, x0=None) -> SolveReport:
    """Maximise the program's linear objective with the barrier method."""
    opts = opts or SolverOptions()
    if opts.debug_checks:
        check_derivatives(prog, x0 if x0 is not None else np.zeros(prog.n))
    c = prog.objective_vector()
    phase1 = find_feasible_point(prog, x0, opts)
    if not phase1.ok:
        return phase1
    cp = _Compiled(prog, phase1=False)
    try:
        status, x, outer, steps, gap, _ = _barrier_method(
            cp, phase1.x, -c, opts, max(1, opts.max_newton - phase1.newton_steps)
        )
    except _NumericalFailure as exc:
        return SolveReport(Status.NUMERICAL_FAILURE, phase1.x, float(c @ phase1.x), float("inf"),
                           newton_steps=phase1.newton_steps, phase1_steps=phase1.newton_steps, message=str(exc))
    vals = cp.values(x)
    viol = float(np.max(vals, initial=-np.inf))
    if status is Status.OPTIMAL and (viol > opts.feas_tol or gap > opts.gap_tol):
        status = Status.NUMERICAL_FAILURE
    return SolveReport(
        status, x, float(c @ x), viol, outer, steps + phase1.newton_steps, phase1.newton_steps,
        worst_constraint=cp.names[int(np.argmax(vals))] if vals.size else None, gap=gap,
        barrier_t=cp.theta / gap if gap > 0 else float("inf"),
    )


def check_derivatives(prog: ConvexProgram, x, h=1e-5, rtol=1e-4):
    """Compare smooth-block gradients against central differences; raises on mismatch."""
    x = np.asarray(x, dtype=float)
    for blk in prog.blocks:
        if blk.kind != "smooth":
            continue
        X = x[blk.idx]
        g, G, _ = blk.fn(X)
        if not np.all(np.isfinite(g)):
            continue
        for k in range(X.shape[1]):
            Xp, Xm = X.copy(), X.copy()
            Xp[:, k] += h
            Xm[:, k] -= h
            fd = (blk.fn(Xp)[0] - blk.fn(Xm)[0]) / (2 * h)
            ok = np.isclose(fd, G[:, k], rtol=rtol, atol=1e-6 * (1 + np.abs(G[:, k])))
            ok |= ~np.isfinite(fd)
            if not np.all(ok):
                bad = int(np.argmin(ok))
                raise AssertionError(f"gradient mismatch in {blk.names[bad]} (var {k}): {G[bad, k]} vs {fd[bad]}")


def check_convexity(prog: ConvexProgram, points, rng, pairs=50, tol=1e-9):
    """Midpoint convexity test of nonlinear rows on random pairs drawn from ``points``."""
    points = np.asarray(points, dtype=float)
    cp = _Compiled(prog, phase1=False)
    for _ in range(pairs):
        i, j = rng.integers(0, len(points), size=2)
        xa, xb = points[i], points[j]
        ga, gb, gm = cp.values(xa), cp.values(xb), cp.values(0.5 * (xa + xb))
        finite = np.isfinite(ga) & np.isfinite(gb)
        lhs = gm[finite]
        rhs = 0.5 * (ga + gb)[finite]
        if np.any(lhs > rhs + tol * (1 + np.abs(rhs))):
            k = int(np.flatnonzero(finite)[np.argmax(lhs - rhs)])
            raise AssertionError(f"midpoint convexity violated by {cp.names[k]}")
