"""Sequential quadratic programming with a damped-BFGS Lagrangian model.

The solver consumes any problem object exposing

* ``dim`` -- number of variables,
* ``eval_objective(w) -> (value, gradient)``,
* ``eval_constraints(w) -> (ci, Ji, ce, Je)`` with the ``ci <= 0`` / ``ce = 0``
  convention,
* optionally ``eval_constraint_values(w) -> (ci, ce)`` as a cheaper
  value-only path for the line search, and
* optionally ``weave_multipliers(lam_in, lam_eq)`` to report multipliers in
  the problem's documented row order.

Each iteration solves a convex QP on the quadratic model (the BFGS matrix is
kept positive definite by Powell damping) and runs a nonmonotone l1-merit
line search with a second-order correction; the QP multipliers become the new
multiplier estimate.  Infeasible subproblems get one elastic-mode
(slack-penalized) retry.  The reformulation NLPs served here are routinely
degenerate, so the endgame favors robustness: a stalled line search first
retries from a reset quadratic model before giving up.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .qp import solve_qp

__all__ = ["NlpSolution", "solve_nlp", "kkt_residual_parts"]

_ALPHA_MIN = 1e-12
_ARMIJO = 0.1
_MERIT_MEMORY = 4


@dataclass
class NlpSolution:
    point: np.ndarray
    multipliers: np.ndarray
    mult_ineq: np.ndarray
    mult_eq: np.ndarray
    status: str  # kkt_ok | max_iter | infeasible_subproblem | line_search_fail
    kkt_residual: float
    iterations: int
    wall_time: float
    constraint_violation: float = 0.0
    objective: float = field(default=float("nan"))

    @property
    def ok(self) -> bool:
        return self.status == "kkt_ok"


def kkt_residual_parts(grad, ci, ji, ce, je, lam_in, lam_eq):
    """Stationarity / feasibility / complementarity / dual-sign residuals."""
    stat = grad.copy()
    if lam_in.size:
        stat += ji.T @ lam_in
    if lam_eq.size:
        stat += je.T @ lam_eq
    feas = 0.0
    if ci.size:
        feas = float(np.max(np.maximum(ci, 0.0), initial=0.0))
    if ce.size:
        feas = max(feas, float(np.max(np.abs(ce), initial=0.0)))
    comp = float(np.max(np.abs(lam_in * ci), initial=0.0)) if ci.size else 0.0
    dual = float(np.max(np.maximum(-lam_in, 0.0), initial=0.0)) if lam_in.size else 0.0
    return float(np.linalg.norm(stat, np.inf)), feas, comp, dual


def _kkt_residual(grad, ci, ji, ce, je, lam_in, lam_eq) -> float:
    return max(kkt_residual_parts(grad, ci, ji, ce, je, lam_in, lam_eq))


def _violation(ci: np.ndarray, ce: np.ndarray) -> float:
    v = 0.0
    if ci.size:
        v += float(np.sum(np.maximum(ci, 0.0)))
    if ce.size:
        v += float(np.sum(np.abs(ce)))
    return v


def _refine_multipliers(grad, ci, ji, ce, je, act_tol=1e-6):
    """Minimum-norm sign-correct multipliers for the active rows.

    Degenerate problems have whole polytopes of valid multipliers and QP
    solvers bounce between their vertices; the least-squares choice is unique
    and continuous, which makes the convergence test depend on the point
    rather than on the multiplier pick.
    """
    from scipy.optimize import lsq_linear

    # rows with a negligible gradient get multiplier zero outright: they add
    # nothing to stationarity, and tiny columns invite huge spurious values
    col_floor = 1e-8 * (1.0 + float(np.linalg.norm(grad, np.inf)))
    active = np.where(ci >= -act_tol)[0] if ci.size else np.zeros(0, dtype=int)
    active = np.array(
        [i for i in active if np.linalg.norm(ji[i], np.inf) > col_floor], dtype=int
    )
    eq_keep = np.array(
        [k for k in range(ce.size) if np.linalg.norm(je[k], np.inf) > col_floor],
        dtype=int,
    )
    cols = []
    lo = []
    hi = []
    for i in active:
        cols.append(ji[i])
        lo.append(0.0)
        hi.append(np.inf)
    for k in eq_keep:
        cols.append(je[k])
        lo.append(-np.inf)
        hi.append(np.inf)
    lam_in = np.zeros(ci.size)
    lam_eq = np.zeros(ce.size)
    if cols:
        mat = np.vstack(cols).T
        try:
            with np.errstate(all="ignore"):
                sol = lsq_linear(mat, -grad, bounds=(np.array(lo), np.array(hi)))
        except ValueError:
            return lam_in, lam_eq
        lam_in[active] = sol.x[: active.size]
        lam_eq[eq_keep] = sol.x[active.size :]
    return lam_in, lam_eq


def _soc_step(nlp, trial, ji, je, values_only):
    """Minimum-norm correction toward the constraints at the trial point.

    Uses the Jacobians from the current iterate (the standard correction), so
    no extra derivative evaluations are needed.
    """
    if values_only is not None:
        ci_t, ce_t = values_only(trial)
    else:
        ci_t, _, ce_t, _ = nlp.eval_constraints(trial)
    if _violation(ci_t, ce_t) <= 1e-12:
        return None
    nv = trial.size
    act = ci_t > -1e-8 if ci_t.size else np.zeros(0, dtype=bool)
    res = solve_qp(
        np.eye(nv),
        np.zeros(nv),
        je if ce_t.size else None,
        -ce_t if ce_t.size else None,
        ji[act] if np.any(act) else None,
        -ci_t[act] if np.any(act) else None,
    )
    if res.status == "infeasible":
        return None
    return trial + res.x


def _elastic_qp(b, grad, ji, ci, je, ce, rho):
    """Slack-penalized QP: always feasible version of the step subproblem."""
    nv = grad.size
    mi, me = ci.size, ce.size
    ntot = nv + mi + 2 * me
    h = np.zeros((ntot, ntot))
    h[:nv, :nv] = b
    h[nv:, nv:] = 1e-8 * np.eye(mi + 2 * me)
    g = np.concatenate([grad, rho * np.ones(mi + 2 * me)])
    rows = []
    rhs = []
    if mi:
        block = np.zeros((mi, ntot))
        block[:, :nv] = ji
        block[:, nv : nv + mi] = -np.eye(mi)
        rows.append(block)
        rhs.append(-ci)
    bound = np.zeros((mi + 2 * me, ntot))
    bound[:, nv:] = -np.eye(mi + 2 * me)
    rows.append(bound)
    rhs.append(np.zeros(mi + 2 * me))
    a_in = np.vstack(rows)
    b_in = np.concatenate(rhs)
    a_eq = None
    b_eq = None
    if me:
        a_eq = np.zeros((me, ntot))
        a_eq[:, :nv] = je
        a_eq[:, nv + mi : nv + mi + me] = np.eye(me)
        a_eq[:, nv + mi + me :] = -np.eye(me)
        b_eq = -ce
    res = solve_qp(h, g, a_eq, b_eq, a_in, b_in)
    if res.status == "infeasible":
        return None
    d = res.x[:nv]
    lam_in = res.ineq_mult[:mi] if mi else np.zeros(0)
    lam_eq = res.eq_mult if me else np.zeros(0)
    return d, lam_in, lam_eq


def solve_nlp(
    nlp,
    start,
    tol: float = 1e-8,
    *,
    max_iter: int = 500,
    trace=None,
) -> NlpSolution:
    """Run SQP from ``start`` until the KKT residual drops below ``tol``.

    ``trace`` may be a callable or a writable file; it receives one CSV line
    ``iter,merit,kkt_residual,step_len`` per iteration.
    """
    t0 = time.perf_counter()
    w = np.asarray(start, dtype=float).copy()
    if w.shape != (nlp.dim,):
        raise ValueError(f"start has shape {w.shape}, expected ({nlp.dim},)")

    def emit(it, merit, kkt, step):
        if trace is None:
            return
        line = f"{it},{merit:.12g},{kkt:.12g},{step:.12g}"
        if callable(trace):
            trace(line)
        else:
            trace.write(line + "\n")

    def finish(status, w, lam_in, lam_eq, kkt, feas, it, fval):
        weave = getattr(nlp, "weave_multipliers", None)
        mults = weave(lam_in, lam_eq) if weave else np.concatenate([lam_in, lam_eq])
        return NlpSolution(
            point=w,
            multipliers=mults,
            mult_ineq=lam_in,
            mult_eq=lam_eq,
            status=status,
            kkt_residual=kkt,
            iterations=it,
            wall_time=time.perf_counter() - t0,
            constraint_violation=feas,
            objective=fval,
        )

    fval, grad = nlp.eval_objective(w)
    ci, ji, ce, je = nlp.eval_constraints(w)
    lam_in = np.zeros(ci.size)
    lam_eq = np.zeros(ce.size)
    nvar = w.size
    b = np.eye(nvar)
    penalty = 1.0

    values_only = getattr(nlp, "eval_constraint_values", None)

    def merit_at(point):
        f, _ = nlp.eval_objective(point)
        if values_only is not None:
            ci_t, ce_t = values_only(point)
        else:
            ci_t, _, ce_t, _ = nlp.eval_constraints(point)
        merit = f + penalty * _violation(ci_t, ce_t)
        if not np.isfinite(merit):
            merit = np.inf
        return merit, f

    # (objective, violation) pairs of recent iterates for the nonmonotone test
    history: list[tuple[float, float]] = []
    model_was_reset = False
    best = None  # (score, kkt, w, lam_in, lam_eq, feas, fval)
    best_it = 0

    def track_best(kkt_val, wv, li, le, feas_val, fv, it_val):
        # near-feasible iterates outrank infeasible ones regardless of their
        # stationarity; among near-feasible ones the smallest residual wins
        nonlocal best, best_it
        score = (0, kkt_val) if feas_val <= 1e-7 else (1, feas_val)
        if best is None or score < (best[0][0], 0.9 * best[0][1]):
            best_it = it_val
        if best is None or score < best[0]:
            best = (score, kkt_val, wv.copy(), li.copy(), le.copy(), feas_val, fv)

    def finish_best(status, it_val):
        _, kkt_b, w_b, li_b, le_b, feas_b, f_b = best
        return finish(status, w_b, li_b, le_b, kkt_b, feas_b, it_val, f_b)

    it = 0
    for it in range(1, max_iter + 1):
        stat, feas, comp, dual = kkt_residual_parts(grad, ci, ji, ce, je, lam_in, lam_eq)
        kkt = max(stat, feas, comp, dual)
        if kkt <= tol:
            return finish("kkt_ok", w, lam_in, lam_eq, kkt, feas, it - 1, fval)
        track_best(kkt, w, lam_in, lam_eq, feas, fval, it)
        if feas <= max(tol, 1e-7) and kkt > tol:
            # minimum-norm multipliers often certify the point already
            lam_in_r, lam_eq_r = _refine_multipliers(grad, ci, ji, ce, je)
            kkt_r = _kkt_residual(grad, ci, ji, ce, je, lam_in_r, lam_eq_r)
            track_best(kkt_r, w, lam_in_r, lam_eq_r, feas, fval, it)
            if kkt_r <= tol:
                return finish("kkt_ok", w, lam_in_r, lam_eq_r, kkt_r, feas, it - 1, fval)
        if it - best_it > 40:
            return finish_best("max_iter", it)

        qp = solve_qp(b, grad, je if ce.size else None, -ce if ce.size else None,
                      ji if ci.size else None, -ci if ci.size else None)
        if qp.status != "infeasible":
            # near-converged directions from degenerate QPs are still usable;
            # the merit line search rejects the genuinely bad ones
            d = qp.x
            lam_in_new = qp.ineq_mult if ci.size else np.zeros(0)
            lam_eq_new = qp.eq_mult if ce.size else np.zeros(0)
        else:
            rho = max(1e4, 100.0 * penalty)
            elastic = _elastic_qp(b, grad, ji, ci, je, ce, rho)
            if elastic is None:
                track_best(kkt, w, lam_in, lam_eq, feas, fval, it)
                return finish_best("infeasible_subproblem", it)
            d, lam_in_new, lam_eq_new = elastic

        kkt_new = _kkt_residual(grad, ci, ji, ce, je, lam_in_new, lam_eq_new)
        track_best(kkt_new, w, lam_in_new, lam_eq_new, feas, fval, it)
        if kkt_new <= tol:
            # report the least-squares certificate when it is as good: QP
            # multipliers on degenerate rows can be huge vertex picks
            lam_in_r, lam_eq_r = _refine_multipliers(grad, ci, ji, ce, je)
            kkt_r = _kkt_residual(grad, ci, ji, ce, je, lam_in_r, lam_eq_r)
            if kkt_r <= tol:
                return finish("kkt_ok", w, lam_in_r, lam_eq_r, kkt_r, feas, it, fval)
            return finish("kkt_ok", w, lam_in_new, lam_eq_new, kkt_new, feas, it, fval)
        step_scale = float(np.linalg.norm(d, np.inf))
        if step_scale <= 1e-14 * (1.0 + np.linalg.norm(w, np.inf)):
            return finish_best("line_search_fail" if best[1] > tol else "kkt_ok", it)

        mults_norm = max(
            float(np.max(np.abs(lam_in_new), initial=0.0)),
            float(np.max(np.abs(lam_eq_new), initial=0.0)),
        )
        needed = 1.1 * mults_norm + 1e-4
        # let the penalty decay once multipliers shrink; exactness only needs
        # it above the current multiplier scale
        penalty = needed if needed > penalty else max(needed, 0.5 * penalty)
        viol0 = _violation(ci, ce)
        merit0 = fval + penalty * viol0
        history.append((fval, viol0))
        del history[: -_MERIT_MEMORY]
        merit_ref = max(f + penalty * v for f, v in history)
        descent = float(grad @ d) - penalty * viol0

        alpha = 1.0
        accepted = False
        soc_tried = False
        # slack at the floating-point floor of the merit keeps the endgame
        # from stalling when predicted decrease is below double resolution
        slack = 1e-14 * (1.0 + abs(merit_ref))
        trial = w
        while alpha >= _ALPHA_MIN:
            trial = w + alpha * d
            merit_t, _ = merit_at(trial)
            if merit_t <= merit_ref + _ARMIJO * alpha * min(descent, 0.0) + slack:
                accepted = True
                break
            if not soc_tried and alpha == 1.0:
                # second-order correction: cancel the curvature-induced
                # constraint violation of the full step, then retest
                soc_tried = True
                corrected = _soc_step(nlp, trial, ji, je, values_only)
                if corrected is not None:
                    merit_c, _ = merit_at(corrected)
                    if merit_c <= merit_ref + _ARMIJO * min(descent, 0.0) + slack:
                        trial = corrected
                        accepted = True
                        break
            alpha *= 0.5
        if not accepted:
            if not model_was_reset:
                # the quadratic model may be corrupt; retry once from scratch
                model_was_reset = True
                b = np.eye(nvar)
                history.clear()
                continue
            return finish_best("line_search_fail", it)
        model_was_reset = False

        grad_l_old = grad + (ji.T @ lam_in_new if lam_in_new.size else 0.0) \
            + (je.T @ lam_eq_new if lam_eq_new.size else 0.0)

        s = trial - w
        w = trial
        fval, grad = nlp.eval_objective(w)
        ci, ji, ce, je = nlp.eval_constraints(w)
        grad_l_new = grad + (ji.T @ lam_in_new if lam_in_new.size else 0.0) \
            + (je.T @ lam_eq_new if lam_eq_new.size else 0.0)

        # Powell-damped BFGS keeps the model positive definite.
        yvec = grad_l_new - grad_l_old
        bs = b @ s
        sbs = float(s @ bs)
        sy = float(s @ yvec)
        if sbs > 1e-16:
            if sy < 0.2 * sbs:
                theta = 0.8 * sbs / (sbs - sy)
                yvec = theta * yvec + (1.0 - theta) * bs
                sy = float(s @ yvec)
            if sy > 1e-16:
                b = b - np.outer(bs, bs) / sbs + np.outer(yvec, yvec) / sy
                if not np.all(np.isfinite(b)):
                    b = np.eye(nvar)

        lam_in, lam_eq = lam_in_new, lam_eq_new
        emit(it, merit0, kkt, alpha)

        if np.linalg.norm(w, np.inf) > 1e12:
            break

    kkt = _kkt_residual(grad, ci, ji, ce, je, lam_in, lam_eq)
    _, feas, _, _ = kkt_residual_parts(grad, ci, ji, ce, je, lam_in, lam_eq)
    track_best(kkt, w, lam_in, lam_eq, feas, fval, it)
    return finish_best("max_iter", it)
