"""Convex subproblem solvers: the lower-level program and the projection QP.

The lower level ``min_y f(x, y) s.t. g(x, y) <= 0, h(x, y) = 0`` is routed by
structure: LP to HiGHS, QP to the interior-point solver, anything with a
nonlinear constraint or objective term to the SQP solver with a least-squares
multiplier extraction on the active set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, lsq_linear

from ..model import BilevelProblem, UpperSet
from .qp import solve_qp
from .sqp import solve_nlp

__all__ = ["ConvexSolveResult", "solve_convex_lower", "project_upper"]

_STATIONARITY_TOL = 1e-7


@dataclass
class ConvexSolveResult:
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    value: float
    status: str  # optimal | infeasible | failed

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class _LowerAsNlp:
    """The lower-level program over y alone, for the SQP path."""

    def __init__(self, problem: BilevelProblem, x: np.ndarray):
        self.f = problem.lower_objective.fix_x(x)
        self.gs = [func.fix_x(x) for func in problem.lower.inequalities]
        self.hs = [func.fix_x(x) for func in problem.lower.equalities]
        self.dim = problem.m
        self._zero = np.zeros(0)

    def eval_objective(self, y):
        return self.f.value(self._zero, y), self.f.grad_y(self._zero, y)

    def eval_constraints(self, y):
        z = self._zero
        ci = np.array([g.value(z, y) for g in self.gs])
        ji = (
            np.vstack([g.grad_y(z, y) for g in self.gs])
            if self.gs
            else np.zeros((0, self.dim))
        )
        ce = np.array([h.value(z, y) for h in self.hs])
        je = (
            np.vstack([h.grad_y(z, y) for h in self.hs])
            if self.hs
            else np.zeros((0, self.dim))
        )
        return ci, ji, ce, je

    def eval_constraint_values(self, y):
        z = self._zero
        ci = np.array([g.value(z, y) for g in self.gs])
        ce = np.array([h.value(z, y) for h in self.hs])
        return ci, ce


def _verify(problem: BilevelProblem, x, y, u, v) -> bool:
    """Check the stationarity / complementarity contract of the result."""
    _, jy_g = problem.g_jac(x, y)
    _, jy_h = problem.h_jac(x, y)
    stat = problem.lower_objective.grad_y(x, y)
    if u.size:
        stat = stat + jy_g.T @ u
    if v.size:
        stat = stat + jy_h.T @ v
    if np.linalg.norm(stat, np.inf) > _STATIONARITY_TOL:
        return False
    if u.size:
        gvals = problem.g_values(x, y)
        if np.max(np.abs(u * gvals), initial=0.0) > _STATIONARITY_TOL:
            return False
        if np.min(u, initial=0.0) < -1e-9:
            return False
    return True


def _solve_lp(problem: BilevelProblem, x) -> ConvexSolveResult:
    m = problem.m
    zero_y = np.zeros(m)
    c = problem.lower_objective.grad_y(x, zero_y)
    jx_g, jy_g = problem.g_jac(x, zero_y)
    jx_h, jy_h = problem.h_jac(x, zero_y)
    b_ub = -problem.g_values(x, zero_y)
    b_eq = -problem.h_values(x, zero_y)
    res = linprog(
        c,
        A_ub=jy_g if problem.p else None,
        b_ub=b_ub if problem.p else None,
        A_eq=jy_h if problem.q else None,
        b_eq=b_eq if problem.q else None,
        bounds=[(None, None)] * m,
        method="highs",
    )
    if res.status == 2:
        return ConvexSolveResult(np.zeros(m), np.zeros(problem.p), np.zeros(problem.q), np.inf, "infeasible")
    if not res.success:
        return ConvexSolveResult(np.zeros(m), np.zeros(problem.p), np.zeros(problem.q), np.nan, "failed")
    y = np.asarray(res.x)
    # HiGHS marginals are d(objective)/d(rhs); our u, v sit on the other side.
    u = -np.asarray(res.ineqlin.marginals) if problem.p else np.zeros(0)
    v = -np.asarray(res.eqlin.marginals) if problem.q else np.zeros(0)
    value = problem.lower_objective.value(x, y)
    if not _verify(problem, x, y, u, v):
        return ConvexSolveResult(y, u, v, value, "failed")
    return ConvexSolveResult(y, u, v, value, "optimal")


def _crossover(hess, c, jg, g0, jh, h0, y, tol=1e-9):
    """Snap an interior-point QP solution onto its optimal face.

    Interior-point iterates leave tiny complementarity gaps (both u_i and g_i
    slightly nonzero), which poisons exact-complementarity consumers such as
    the constraint-qualification checker.  A few primal-dual active-set passes
    produce a solution with inactive multipliers exactly zero.
    """
    mi = g0.size
    me = h0.size
    nv = y.size
    active = set(np.where(jg @ y + g0 >= -1e-6)[0]) if mi else set()
    for _ in range(40):
        rows = sorted(active)
        k = len(rows) + me
        kkt_true = np.zeros((nv + k, nv + k))
        kkt_true[:nv, :nv] = hess
        mats = []
        rhs = []
        if rows:
            mats.append(jg[rows])
            rhs.append(-g0[np.array(rows, dtype=int)])
        if me:
            mats.append(jh)
            rhs.append(-h0)
        if k:
            stacked = np.vstack(mats)
            kkt_true[:nv, nv:] = stacked.T
            kkt_true[nv:, :nv] = stacked
        kkt_reg = kkt_true.copy()
        kkt_reg[:nv, :nv] += 1e-12 * np.eye(nv)
        if k:
            kkt_reg[nv:, nv:] -= 1e-11 * np.eye(k)
        full_rhs = np.concatenate([-c] + rhs) if k else -c
        try:
            sol = np.linalg.solve(kkt_reg, full_rhs)
            # refine against the unregularized system so the active rows are
            # satisfied to machine precision, not to the regularization scale
            for _ in range(2):
                sol += np.linalg.solve(kkt_reg, full_rhs - kkt_true @ sol)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        y_new = sol[:nv]
        mult = sol[nv:]
        u_new = np.zeros(mi)
        if rows:
            u_new[np.array(rows, dtype=int)] = mult[: len(rows)]
        v_new = mult[len(rows) :]
        violated = np.where(jg @ y_new + g0 > tol)[0] if mi else np.zeros(0, dtype=int)
        fresh = [i for i in violated if i not in active]
        if fresh:
            active.update(fresh)
            continue
        negative = [i for i in rows if u_new[i] < -1e-9]
        if negative:
            active.discard(min(negative, key=lambda i: u_new[i]))
            continue
        u_new[u_new < 0.0] = 0.0
        return y_new, u_new, v_new
    return None


def _lower_rows_feasible(problem: BilevelProblem, x, jy_g, g0, jy_h, h0):
    """Definitive phase-1 verdict for the affine lower-level rows."""
    res = linprog(
        np.zeros(problem.m),
        A_ub=jy_g if problem.p else None,
        b_ub=-g0 if problem.p else None,
        A_eq=jy_h if problem.q else None,
        b_eq=-h0 if problem.q else None,
        bounds=[(None, None)] * problem.m,
        method="highs",
    )
    return res.status != 2, (np.asarray(res.x) if res.x is not None else None)


def _solve_qp_lower(problem: BilevelProblem, x) -> ConvexSolveResult:
    m = problem.m
    zero_y = np.zeros(m)
    f = problem.lower_objective
    hess = f.hess_yy(x, zero_y)
    c = f.grad_y(x, zero_y)
    _, jy_g = problem.g_jac(x, zero_y)
    _, jy_h = problem.h_jac(x, zero_y)
    g0 = problem.g_values(x, zero_y)
    h0 = problem.h_values(x, zero_y)
    res = solve_qp(
        hess,
        c,
        jy_h if problem.q else None,
        -h0 if problem.q else None,
        jy_g if problem.p else None,
        -g0 if problem.p else None,
    )
    # The interior-point iteration can stall on semidefinite Hessians; the
    # active-set snap from its best iterate usually completes the solve, so
    # never trust an "infeasible" verdict without the phase-1 check.
    starts = [res.x]
    feasible, witness = _lower_rows_feasible(problem, x, jy_g, g0, jy_h, h0)
    if not feasible:
        return ConvexSolveResult(
            np.zeros(m), np.zeros(problem.p), np.zeros(problem.q), np.inf, "infeasible"
        )
    if witness is not None:
        starts.append(witness)
    for start in starts:
        snapped = _crossover(hess, c, jy_g, g0, jy_h, h0, start)
        if snapped is None:
            continue
        y_s, u_s, v_s = snapped
        if _verify(problem, x, y_s, u_s, v_s) and np.max(
            jy_g @ y_s + g0, initial=0.0
        ) <= 1e-9:
            return ConvexSolveResult(y_s, u_s, v_s, f.value(x, y_s), "optimal")
    y = res.x
    u = res.ineq_mult if problem.p else np.zeros(0)
    v = res.eq_mult if problem.q else np.zeros(0)
    value = f.value(x, y)
    if not res.ok or not _verify(problem, x, y, u, v):
        return ConvexSolveResult(y, u, v, value, "failed")
    return ConvexSolveResult(y, u, v, value, "optimal")


def _active_set_multipliers(problem: BilevelProblem, x, y, active_tol=1e-6):
    """Least-squares KKT solve on the active set, with u >= 0 enforced."""
    gvals = problem.g_values(x, y)
    _, jy_g = problem.g_jac(x, y)
    _, jy_h = problem.h_jac(x, y)
    grad_f = problem.lower_objective.grad_y(x, y)
    active = np.where(gvals >= -active_tol)[0]
    cols = []
    lower = []
    upper = []
    for i in active:
        cols.append(jy_g[i])
        lower.append(0.0)
        upper.append(np.inf)
    for k in range(problem.q):
        cols.append(jy_h[k])
        lower.append(-np.inf)
        upper.append(np.inf)
    u = np.zeros(problem.p)
    v = np.zeros(problem.q)
    if cols:
        a = np.vstack(cols).T
        sol = lsq_linear(a, -grad_f, bounds=(np.array(lower), np.array(upper)))
        mult = sol.x
        u[active] = mult[: active.size]
        v = mult[active.size :]
    return u, v


def _solve_nlp_lower(problem: BilevelProblem, x) -> ConvexSolveResult:
    adapter = _LowerAsNlp(problem, np.asarray(x, dtype=float))

    def attempt(y0):
        return solve_nlp(adapter, y0, tol=1e-9, max_iter=300)

    starts = [np.zeros(problem.m)]
    # a second start from the affine rows keeps degenerate zero starts honest
    aff_g = [g for g in adapter.gs if g.is_affine]
    aff_h = [h for h in adapter.hs if h.is_affine]
    res_feas = linprog(
        np.zeros(problem.m),
        A_ub=np.vstack([g.cy for g in aff_g]) if aff_g else None,
        b_ub=-np.array([g.c0 for g in aff_g]) if aff_g else None,
        A_eq=np.vstack([h.cy for h in aff_h]) if aff_h else None,
        b_eq=-np.array([h.c0 for h in aff_h]) if aff_h else None,
        bounds=[(None, None)] * problem.m,
        method="highs",
    )
    if res_feas.x is not None:
        starts.append(np.asarray(res_feas.x))

    best = None
    for y0 in starts:
        sol = attempt(y0)
        if sol.status == "infeasible_subproblem":
            continue
        if sol.constraint_violation > 1e-7:
            continue
        if best is None or sol.objective < best.objective:
            best = sol
    if best is None:
        return ConvexSolveResult(
            np.zeros(problem.m), np.zeros(problem.p), np.zeros(problem.q), np.inf, "infeasible"
        )
    y = best.point
    u, v = _active_set_multipliers(problem, x, y)
    value = problem.lower_objective.value(x, y)
    status = "optimal" if _verify(problem, x, y, u, v) else "failed"
    return ConvexSolveResult(y, u, v, value, status)


def solve_convex_lower(problem: BilevelProblem, x) -> ConvexSolveResult:
    """Solve the lower-level program at ``x``; also yields V(x) and multipliers."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (problem.n,):
        raise ValueError(f"x has shape {x.shape}, expected ({problem.n},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    if problem.lower_is_linear():
        return _solve_lp(problem, x)
    if problem.lower_is_quadratic_program():
        return _solve_qp_lower(problem, x)
    return _solve_nlp_lower(problem, x)


def project_upper(upper: UpperSet, x_tilde) -> np.ndarray:
    """Euclidean projection of ``x_tilde`` onto the upper set."""
    x_tilde = np.asarray(x_tilde, dtype=float).reshape(-1)
    if x_tilde.shape != (upper.n,):
        raise ValueError(f"point has shape {x_tilde.shape}, expected ({upper.n},)")
    rows_a, rows_b = upper.rows()
    scale = 1.0 + float(np.abs(rows_b).max(initial=0.0))
    if rows_a.size == 0 or np.all(rows_a @ x_tilde - rows_b <= 1e-12 * scale):
        return x_tilde.copy()
    res = solve_qp(np.eye(upper.n), -x_tilde, None, None, rows_a, rows_b, tol=1e-12)
    return res.x
