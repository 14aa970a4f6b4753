"""Dense convex quadratic programming by a primal-dual interior-point method.

Solves ``min 1/2 x'Hx + g'x  s.t.  A_eq x = b_eq,  A_in x <= b_in`` with H
symmetric positive semidefinite.  Mehrotra predictor-corrector steps, one LU
factorization per iteration, light Tikhonov regularization so rank-deficient
equality blocks do not break the linear algebra.

Degenerate active sets can send multipliers to infinity while the primal
converges; the solver therefore tracks the best iterate seen and reports it
as optimal when its residuals are small, reserving ``infeasible`` for runs
whose primal residual never comes down.
"""

from __future__ import annotations

from dataclasses import dataclass

import warnings

import numpy as np
import scipy.linalg as sla

__all__ = ["QpResult", "solve_qp"]


def _factor_solve(kkt):
    """LU factor with a least-squares fallback for exactly singular systems."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            factor = sla.lu_factor(kkt)
        except (sla.LinAlgError, ValueError):
            factor = None

    def solve(rhs):
        if factor is not None:
            with np.errstate(all="ignore"):
                sol = sla.lu_solve(factor, rhs)
            if np.all(np.isfinite(sol)):
                return sol
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        return sol

    return solve

_REG_PRIMAL = 1e-12
_REG_DUAL = 1e-11
_STEP_SHRINK = 0.9995
_ACCEPT_TOL = 1e-8


@dataclass
class QpResult:
    x: np.ndarray
    eq_mult: np.ndarray
    ineq_mult: np.ndarray
    status: str  # optimal | infeasible | max_iter
    iterations: int
    residual: float

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _empty(n_cols: int, mat, vec) -> tuple[np.ndarray, np.ndarray]:
    if mat is None:
        return np.zeros((0, n_cols)), np.zeros(0)
    mat = np.asarray(mat, dtype=float)
    vec = np.asarray(vec, dtype=float).reshape(-1)
    return mat, vec


def _solve_kkt(h: np.ndarray, g: np.ndarray, a_eq: np.ndarray, b_eq: np.ndarray) -> QpResult:
    """Equality-constrained case: one regularized symmetric solve."""
    nv, me = h.shape[0], a_eq.shape[0]
    kkt = np.zeros((nv + me, nv + me))
    kkt[:nv, :nv] = h + _REG_PRIMAL * np.eye(nv)
    kkt[:nv, nv:] = a_eq.T
    kkt[nv:, :nv] = a_eq
    kkt[nv:, nv:] = -_REG_DUAL * np.eye(me)
    rhs = np.concatenate([-g, b_eq])
    sol = _factor_solve(kkt)(rhs)
    x, nu = sol[:nv], sol[nv:]
    resid = float(np.linalg.norm(a_eq @ x - b_eq, np.inf)) if me else 0.0
    scale = 1.0 + (np.linalg.norm(b_eq, np.inf) if me else 0.0)
    status = "optimal" if resid <= 1e-8 * scale else "infeasible"
    return QpResult(x, nu, np.zeros(0), status, 1, resid)


def solve_qp(
    h,
    g,
    a_eq=None,
    b_eq=None,
    a_in=None,
    b_in=None,
    *,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> QpResult:
    """Solve a convex QP; returns the point and exact-signed multipliers.

    Multipliers satisfy ``Hx + g + A_eq' nu + A_in' lam = 0`` with
    ``lam >= 0``.
    """
    g = np.asarray(g, dtype=float).reshape(-1)
    nv = g.shape[0]
    h = np.asarray(h, dtype=float).reshape(nv, nv)
    a_eq, b_eq = _empty(nv, a_eq, b_eq)
    a_in, b_in = _empty(nv, a_in, b_in)
    me, mi = a_eq.shape[0], a_in.shape[0]

    if mi == 0:
        if me == 0:
            try:
                x = np.linalg.solve(h + _REG_PRIMAL * np.eye(nv), -g)
            except np.linalg.LinAlgError:
                x, *_ = np.linalg.lstsq(h, -g, rcond=None)
            return QpResult(x, np.zeros(0), np.zeros(0), "optimal", 1, 0.0)
        return _solve_kkt(h, g, a_eq, b_eq)

    x = np.zeros(nv)
    nu = np.zeros(me)
    s = np.maximum(b_in - a_in @ x, 1.0)
    lam = np.ones(mi)

    scale_g = 1.0 + np.linalg.norm(g, np.inf)
    scale_be = 1.0 + (np.linalg.norm(b_eq, np.inf) if me else 0.0)
    scale_bi = 1.0 + np.linalg.norm(b_in, np.inf)

    def scaled_residual(xc, nuc, lamc, sc):
        r_d = h @ xc + g + a_in.T @ lamc + (a_eq.T @ nuc if me else 0.0)
        parts = [np.linalg.norm(r_d, np.inf) / scale_g]
        if me:
            parts.append(np.linalg.norm(a_eq @ xc - b_eq, np.inf) / scale_be)
        parts.append(np.linalg.norm(a_in @ xc + sc - b_in, np.inf) / scale_bi)
        parts.append(float(sc @ lamc / mi))
        return max(parts)

    best = (scaled_residual(x, nu, lam, s), x.copy(), nu.copy(), lam.copy())
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        r_d = h @ x + g + a_in.T @ lam + (a_eq.T @ nu if me else 0.0)
        r_pe = a_eq @ x - b_eq if me else np.zeros(0)
        r_pi = a_in @ x + s - b_in
        mu = float(s @ lam / mi)
        current = max(
            np.linalg.norm(r_d, np.inf) / scale_g,
            (np.linalg.norm(r_pe, np.inf) / scale_be) if me else 0.0,
            np.linalg.norm(r_pi, np.inf) / scale_bi,
            mu,
        )
        if np.isfinite(current) and current < best[0]:
            best = (current, x.copy(), nu.copy(), lam.copy())
        if current <= tol:
            status = "optimal"
            break
        if not np.isfinite(mu) or np.linalg.norm(lam, np.inf) > 1e13 \
                or np.linalg.norm(x, np.inf) > 1e13:
            break

        s_safe = np.maximum(s, 1e-250)
        with np.errstate(all="ignore"):
            d = np.minimum(lam / s_safe, 1e16)
        m_mat = h + (a_in.T * d) @ a_in + _REG_PRIMAL * np.eye(nv)
        kkt = np.zeros((nv + me, nv + me))
        kkt[:nv, :nv] = m_mat
        if me:
            kkt[:nv, nv:] = a_eq.T
            kkt[nv:, :nv] = a_eq
            kkt[nv:, nv:] = -_REG_DUAL * np.eye(me)
        solve = _factor_solve(kkt)

        def newton(r_comp):
            with np.errstate(all="ignore"):
                rhs_x = -r_d - a_in.T @ ((lam * r_pi - r_comp) / s_safe)
            rhs = np.concatenate([rhs_x, -r_pe]) if me else rhs_x
            if not np.all(np.isfinite(rhs)):
                return None
            sol = solve(rhs)
            dx = sol[:nv]
            dnu = sol[nv:] if me else np.zeros(0)
            with np.errstate(all="ignore"):
                dlam = (lam * (r_pi + a_in @ dx) - r_comp) / s_safe
            ds = -r_pi - a_in @ dx
            return dx, dnu, dlam, ds

        def step_len(vec, dvec):
            neg = dvec < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-vec[neg] / dvec[neg])))

        # predictor
        affine = newton(lam * s)
        if affine is None:
            break
        dx_a, dnu_a, dlam_a, ds_a = affine
        ap = _STEP_SHRINK * step_len(s, ds_a)
        ad = _STEP_SHRINK * step_len(lam, dlam_a)
        mu_aff = float((s + ap * ds_a) @ (lam + ad * dlam_a) / mi)
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # corrector
        corrected = newton(lam * s + dlam_a * ds_a - sigma * mu)
        if corrected is None:
            break
        dx, dnu, dlam, ds = corrected
        ap = _STEP_SHRINK * step_len(s, ds)
        ad = _STEP_SHRINK * step_len(lam, dlam)

        if not all(np.all(np.isfinite(v)) for v in (dx, dnu, dlam, ds)):
            break
        x = x + ap * dx
        s = np.maximum(s + ap * ds, 1e-300)
        lam = np.maximum(lam + ad * dlam, 0.0)
        if me:
            nu = nu + ad * dnu

    if status == "optimal":
        return QpResult(x, nu, lam, status, it, 0.0)

    resid, xb, nub, lamb = best
    if resid <= _ACCEPT_TOL:
        return QpResult(xb, nub, lamb, "optimal", it, resid)
    feas = max(
        (np.linalg.norm(a_eq @ xb - b_eq, np.inf) / scale_be) if me else 0.0,
        float(np.max(np.maximum(a_in @ xb - b_in, 0.0), initial=0.0)) / scale_bi,
    )
    status = "infeasible" if feas > 1e-6 else "max_iter"
    return QpResult(xb, nub, lamb, status, it, resid)
