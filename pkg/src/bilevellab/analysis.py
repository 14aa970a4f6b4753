"""Verification instruments: duality gaps, MFCQ certificates, multiplier maps,
strong stationarity, region embeddings, and a brute-force global oracle.

These are the checkable statements of the theory.  Everything here evaluates
residuals of explicit systems; nothing is trusted from the solvers without an
independent recomputation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .model import BilevelProblem
from .nlp import solve_convex_lower, solve_nlp
from .reformulate import (
    DUALITY_KINDS,
    DualKind,
    ReformulationKind,
    SingleLevelNlp,
    build,
    build_dual,
)

__all__ = [
    "AnalysisError",
    "KktResidual",
    "nlp_kkt_residual",
    "StationarityReport",
    "strong_stationarity",
    "MultiplierBlocks",
    "extract_multiplier_blocks",
    "MultiplierMap",
    "map_kkt",
    "MAP_TARGETS",
    "MfcqReport",
    "check_mfcq",
    "mfcq_candidate_points",
    "validate_mfcq_direction",
    "DualityReport",
    "check_weak_duality",
    "OracleResult",
    "brute_force_bilevel",
    "INCLUSION_PAIRS",
    "check_embeddings",
    "sample_lifted_points",
]

_ACTIVE_TOL = 1e-7


class AnalysisError(ValueError):
    """A verification routine was invoked outside its hypotheses."""


# ---------------------------------------------------------------------------
# Generic KKT residuals


@dataclass(frozen=True)
class KktResidual:
    stationarity: float
    feasibility: float
    complementarity: float
    dual_sign: float

    @property
    def total(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity, self.dual_sign)


def nlp_kkt_residual(nlp: SingleLevelNlp, w, row_mults) -> KktResidual:
    """KKT residual of a built NLP at ``w`` with per-row multipliers."""
    w = np.asarray(w, dtype=float)
    row_mults = np.asarray(row_mults, dtype=float)
    _, grad = nlp.eval_objective(w)
    vals = nlp.row_values(w)
    jac = nlp.row_jacobian(w)
    stat = float(np.linalg.norm(grad + jac.T @ row_mults, np.inf))
    is_eq = np.array([s == "eq" for s in nlp.senses])
    feas = float(np.max(nlp.residuals(w), initial=0.0))
    comp = float(np.max(np.abs(row_mults[~is_eq] * vals[~is_eq]), initial=0.0))
    dual = float(np.max(np.maximum(-row_mults[~is_eq], 0.0), initial=0.0))
    return KktResidual(stat, feas, comp, dual)


# ---------------------------------------------------------------------------
# Strong stationarity for the KKT-based reformulation


@dataclass
class StationarityReport:
    kkt_residual: float
    feasibility: float
    sign_violation: float
    i_active_positive: np.ndarray  # g_i = 0, u_i > 0
    i_inactive_zero: np.ndarray  # g_i < 0, u_i = 0
    i_biactive: np.ndarray  # g_i = 0, u_i = 0
    strong: bool
    lam_g: np.ndarray
    lam_h: np.ndarray
    lam_u: np.ndarray
    lam_L: np.ndarray
    lam_upper: np.ndarray


def _mpcc_index_sets(gvals, u, tol=_ACTIVE_TOL):
    active = gvals >= -tol
    positive = u > tol
    i_pos = np.where(active & positive)[0]
    i_neg = np.where(~active & ~positive)[0]
    i_bi = np.where(active & ~positive)[0]
    return i_pos, i_neg, i_bi


def strong_stationarity(
    problem: BilevelProblem,
    point,
    lam_g,
    lam_h,
    lam_u,
    lam_L,
    lam_upper=None,
    *,
    tol: float = 1e-6,
    sign_tol: float = 1e-9,
) -> StationarityReport:
    """Check the sign-restricted stationarity system at an MPCC point.

    ``point`` is the MPCC point ``(x, y, u, v)``.  The gradient equations are
    the KKT system of the complementarity reformulation with a zero multiplier
    on the complementarity row; the index-set sign conditions replace plain
    complementarity.
    """
    mpcc = build(problem, ReformulationKind.MPCC)
    w = np.asarray(point, dtype=float)
    x, y, _, u, _ = mpcc.layout.split(w)
    gvals = problem.g_values(x, y) if problem.p else np.zeros(0)

    lam_upper = np.zeros(problem.upper.n_rows) if lam_upper is None else np.asarray(lam_upper, float)
    mults = np.zeros(mpcc.n_rows)
    mults[mpcc.rows_by_prefix("upper")] = lam_upper
    mults[mpcc.rows_by_prefix("g_y")] = lam_g
    mults[mpcc.rows_by_prefix("h_y")] = lam_h
    mults[mpcc.rows_by_prefix("stat")] = lam_L
    mults[mpcc.rows_by_prefix("u_nonneg")] = lam_u
    # complementarity row carries no multiplier in this system

    _, grad = mpcc.eval_objective(w)
    jac = mpcc.row_jacobian(w)
    stat = float(np.linalg.norm(grad + jac.T @ mults, np.inf))
    feas = mpcc.max_violation(w)

    i_pos, i_neg, i_bi = _mpcc_index_sets(gvals, u)
    lam_g = np.asarray(lam_g, float)
    lam_u = np.asarray(lam_u, float)
    sign_viol = 0.0
    if i_neg.size:
        sign_viol = max(sign_viol, float(np.max(np.abs(lam_g[i_neg]))))
    if i_pos.size:
        sign_viol = max(sign_viol, float(np.max(np.abs(lam_u[i_pos]))))
    if i_bi.size:
        sign_viol = max(
            sign_viol,
            float(np.max(np.maximum(-lam_g[i_bi], 0.0))),
            float(np.max(np.maximum(-lam_u[i_bi], 0.0))),
        )
    strong = stat <= tol and feas <= tol and sign_viol <= max(sign_tol, tol)
    return StationarityReport(
        kkt_residual=stat,
        feasibility=feas,
        sign_violation=sign_viol,
        i_active_positive=i_pos,
        i_inactive_zero=i_neg,
        i_biactive=i_bi,
        strong=strong,
        lam_g=lam_g,
        lam_h=np.asarray(lam_h, float),
        lam_u=lam_u,
        lam_L=np.asarray(lam_L, float),
        lam_upper=lam_upper,
    )


# ---------------------------------------------------------------------------
# Multiplier extraction and the explicit KKT-point maps


@dataclass
class MultiplierBlocks:
    """Named multiplier blocks of one reformulation's KKT system."""

    kind: ReformulationKind
    upper: np.ndarray
    eta_g: np.ndarray
    eta_h: np.ndarray
    eta_u: np.ndarray
    beta: np.ndarray
    alpha: float = 0.0  # multiplier of the objective-gap row
    gamma: float = 0.0  # multiplier of the aggregate sign row
    theta_h: np.ndarray = field(default_factory=lambda: np.zeros(0))  # h(x,z) rows
    xi_g: np.ndarray = field(default_factory=lambda: np.zeros(0))  # componentwise u.g rows
    xi_h: np.ndarray = field(default_factory=lambda: np.zeros(0))  # componentwise v.h rows
    comp: float = 0.0  # aggregate complementarity row (KKT-based kind)


def extract_multiplier_blocks(nlp: SingleLevelNlp, row_mults) -> MultiplierBlocks:
    row_mults = np.asarray(row_mults, dtype=float)

    def grab(prefix):
        return row_mults[nlp.rows_by_prefix(prefix)]

    def scalar(prefix):
        rows = nlp.rows_by_prefix(prefix)
        return float(row_mults[rows[0]]) if rows.size else 0.0

    return MultiplierBlocks(
        kind=nlp.kind,
        upper=grab("upper"),
        eta_g=grab("g_y"),
        eta_h=grab("h_y"),
        eta_u=grab("u_nonneg"),
        beta=grab("stat"),
        alpha=scalar("gap") + scalar("gap_f"),
        gamma=scalar("agg_gh") + scalar("agg_g"),
        theta_h=grab("h_z"),
        xi_g=grab("comp_g"),
        xi_h=grab("comp_h"),
        comp=scalar("mpcc_comp"),
    )


K = ReformulationKind
MAP_TARGETS: dict[ReformulationKind, tuple[ReformulationKind, ...]] = {
    K.WDP: (K.MDP, K.eMDP, K.TWDP, K.TMDP, K.eTMDP),
    K.MDP: (K.eMDP, K.TMDP, K.eTMDP),
    K.TWDP: (K.eMDP, K.TMDP, K.eTMDP),
    K.eMDP: (K.eTMDP,),
}


@dataclass
class MultiplierMap:
    source_kind: ReformulationKind
    target_kind: ReformulationKind
    source_mults: np.ndarray
    target_mults: np.ndarray
    source_residual: KktResidual
    target_residual: KktResidual
    stationarity_report: StationarityReport | None = None


def _target_blocks(src: MultiplierBlocks, target: ReformulationKind, u, v) -> MultiplierBlocks:
    """Apply the explicit substitution rules between duality-based kinds."""
    p, q = src.eta_g.size, src.eta_h.size
    out = MultiplierBlocks(
        kind=target,
        upper=src.upper.copy(),
        eta_g=src.eta_g.copy(),
        eta_h=src.eta_h.copy(),
        eta_u=src.eta_u.copy(),
        beta=src.beta.copy(),
    )
    ones_p, ones_q = np.ones(p), np.ones(q)
    skind = src.kind
    if skind is K.WDP:
        a = src.alpha
        out.alpha = a
        if target is K.MDP:
            out.gamma = a
        elif target is K.TWDP:
            out.theta_h = -a * v
        elif target is K.TMDP:
            out.gamma = a
            out.theta_h = -a * v
        elif target is K.eMDP:
            out.xi_g = a * ones_p
            out.xi_h = -a * ones_q
        elif target is K.eTMDP:
            out.xi_g = a * ones_p
            out.theta_h = -a * v
        else:
            raise AnalysisError(f"no map from {skind.value} to {target.value}")
    elif skind is K.MDP:
        out.alpha = src.alpha
        g = src.gamma
        if target is K.eMDP:
            out.xi_g = g * ones_p
            out.xi_h = -g * ones_q
        elif target is K.TMDP:
            out.gamma = g
            out.theta_h = -g * v
        elif target is K.eTMDP:
            out.xi_g = g * ones_p
            out.theta_h = -g * v
        else:
            raise AnalysisError(f"no map from {skind.value} to {target.value}")
    elif skind is K.TWDP:
        a = src.alpha
        out.alpha = a
        if target is K.TMDP:
            out.gamma = a
            out.theta_h = src.theta_h.copy()
        elif target is K.eTMDP:
            out.xi_g = a * ones_p
            out.theta_h = src.theta_h.copy()
        elif target is K.eMDP:
            out.xi_g = a * ones_p
            safe = np.abs(v) > 1e-12
            xi_h = np.zeros(q)
            xi_h[safe] = src.theta_h[safe] / v[safe]
            out.xi_h = xi_h
        else:
            raise AnalysisError(f"no map from {skind.value} to {target.value}")
    elif skind is K.eMDP and target is K.eTMDP:
        out.alpha = src.alpha
        out.xi_g = src.xi_g.copy()
        out.theta_h = src.xi_h * v
    else:
        raise AnalysisError(f"no map from {skind.value} to {target.value}")
    return out


def _blocks_to_row_mults(nlp: SingleLevelNlp, blocks: MultiplierBlocks) -> np.ndarray:
    mults = np.zeros(nlp.n_rows)

    def put(prefix, values):
        rows = nlp.rows_by_prefix(prefix)
        if rows.size:
            mults[rows] = values

    put("upper", blocks.upper)
    put("g_y", blocks.eta_g)
    put("h_y", blocks.eta_h)
    put("u_nonneg", blocks.eta_u)
    put("stat", blocks.beta)
    put("gap", blocks.alpha)
    put("gap_f", blocks.alpha)
    put("agg_gh", blocks.gamma)
    put("agg_g", blocks.gamma)
    put("h_z", blocks.theta_h)
    put("comp_g", blocks.xi_g)
    put("comp_h", blocks.xi_h)
    return mults


def _mpcc_lambdas(src: MultiplierBlocks, u, v, gvals):
    """Collapse a duality-kind KKT system at z = y into the sign-restricted one."""
    kind = src.kind
    if kind is K.WDP:
        scale_g, lam_h = src.alpha * u, src.eta_h - src.alpha * v
        scale_u = src.alpha * gvals
    elif kind is K.MDP:
        scale_g, lam_h = src.gamma * u, src.eta_h - src.gamma * v
        scale_u = src.gamma * gvals
    elif kind is K.TWDP:
        scale_g, lam_h = src.alpha * u, src.eta_h + src.theta_h
        scale_u = src.alpha * gvals
    elif kind is K.TMDP:
        scale_g, lam_h = src.gamma * u, src.eta_h + src.theta_h
        scale_u = src.gamma * gvals
    elif kind is K.eMDP:
        scale_g, lam_h = src.xi_g * u, src.eta_h + src.xi_h * v
        scale_u = src.xi_g * gvals
    elif kind is K.eTMDP:
        scale_g, lam_h = src.xi_g * u, src.eta_h + src.theta_h
        scale_u = src.xi_g * gvals
    else:
        raise AnalysisError("source must be a duality-based kind")
    lam_g = src.eta_g - scale_g
    lam_u = src.eta_u + scale_u
    return lam_g, lam_h, lam_u, src.beta.copy(), src.upper.copy()


def map_kkt(
    problem: BilevelProblem,
    point,
    source_kind: ReformulationKind,
    source_mults,
    target_kind: ReformulationKind,
    *,
    feas_tol: float = 1e-6,
) -> MultiplierMap:
    """Transport KKT multipliers from one reformulation to another.

    The point must be feasible to the target (the transport theorems require
    it); otherwise this raises :class:`AnalysisError`.  The returned map
    carries the independently evaluated residual of the target system.
    """
    w = np.asarray(point, dtype=float)
    source = build(problem, source_kind)
    src_res = nlp_kkt_residual(source, w, source_mults)
    blocks = extract_multiplier_blocks(source, source_mults)
    _, _, z, u, v = source.layout.split(w)

    if target_kind is ReformulationKind.MPCC:
        x = w[source.layout.sl("x")]
        y = w[source.layout.sl("y")]
        if z is None or np.linalg.norm(z - y, np.inf) > feas_tol:
            raise AnalysisError("map to the KKT-based kind needs a lifted point with z = y")
        w_mpcc = np.concatenate([x, y, u, v])
        mpcc = build(problem, ReformulationKind.MPCC)
        if mpcc.max_violation(w_mpcc) > feas_tol:
            raise AnalysisError("point is not feasible to the target reformulation")
        gvals = problem.g_values(x, y) if problem.p else np.zeros(0)
        lam_g, lam_h, lam_u, lam_L, lam_up = _mpcc_lambdas(blocks, u, v, gvals)
        report = strong_stationarity(
            problem, w_mpcc, lam_g, lam_h, lam_u, lam_L, lam_up, tol=feas_tol
        )
        tgt_mults = np.zeros(mpcc.n_rows)
        tgt_mults[mpcc.rows_by_prefix("upper")] = lam_up
        tgt_mults[mpcc.rows_by_prefix("g_y")] = lam_g
        tgt_mults[mpcc.rows_by_prefix("h_y")] = lam_h
        tgt_mults[mpcc.rows_by_prefix("stat")] = lam_L
        tgt_mults[mpcc.rows_by_prefix("u_nonneg")] = lam_u
        tgt_res = KktResidual(report.kkt_residual, report.feasibility, 0.0, report.sign_violation)
        return MultiplierMap(source_kind, target_kind, np.asarray(source_mults, float),
                             tgt_mults, src_res, tgt_res, report)

    target = build(problem, target_kind)
    if target.max_violation(w) > feas_tol:
        raise AnalysisError("point is not feasible to the target reformulation")
    tgt_blocks = _target_blocks(blocks, target_kind, u, v)
    tgt_mults = _blocks_to_row_mults(target, tgt_blocks)
    tgt_res = nlp_kkt_residual(target, w, tgt_mults)
    return MultiplierMap(source_kind, target_kind, np.asarray(source_mults, float),
                         tgt_mults, src_res, tgt_res)


# ---------------------------------------------------------------------------
# MFCQ


@dataclass
class MfcqReport:
    holds: bool
    s_star: float
    direction: np.ndarray | None
    eq_rank_ok: bool
    n_equalities: int
    active_rows: list[str]
    max_eq_slope: float = float("nan")
    max_active_slope: float = float("nan")


def _mfcq_gradients(nlp: SingleLevelNlp, point, active_tol):
    w = np.asarray(point, dtype=float)
    vals = nlp.row_values(w)
    jac = nlp.row_jacobian(w)
    is_eq = np.array([s == "eq" for s in nlp.senses])
    active = (~is_eq) & (vals >= -active_tol)
    return jac[is_eq], jac[active], [nlp.tags[i] for i in np.where(active)[0]]


def validate_mfcq_direction(nlp: SingleLevelNlp, point, direction, *, active_tol=_ACTIVE_TOL):
    """Re-check a candidate direction against the raw gradients."""
    d = np.asarray(direction, dtype=float)
    eq_jac, act_jac, active_tags = _mfcq_gradients(nlp, point, active_tol)
    eq_slope = float(np.max(np.abs(eq_jac @ d), initial=0.0)) if eq_jac.size else 0.0
    act_slope = float(np.max(act_jac @ d, initial=-np.inf)) if act_jac.size else -np.inf
    ok = eq_slope <= 1e-9 * (1.0 + np.linalg.norm(d)) and (
        not active_tags or act_slope < 0.0
    )
    return ok, eq_slope, act_slope, active_tags


def check_mfcq(
    nlp: SingleLevelNlp,
    point,
    *,
    active_tol: float = _ACTIVE_TOL,
    feas_tol: float = _ACTIVE_TOL,
) -> MfcqReport:
    """Decide the Mangasarian-Fromovitz qualification at a feasible point.

    A direction LP maximizes the common descent margin ``s`` subject to
    ``grad_h' d = 0`` on equality rows, ``grad_g' d <= -s`` on active
    inequality rows, and a unit box on ``d``; the certificate is re-validated
    against the raw gradients before reporting.  Equality gradients must also
    be linearly independent (rank check).
    """
    w = np.asarray(point, dtype=float)
    if nlp.max_violation(w) > feas_tol:
        raise AnalysisError("MFCQ is only defined at feasible points")
    eq_jac, act_jac, active_tags = _mfcq_gradients(nlp, point, active_tol)

    if eq_jac.shape[0]:
        sv = np.linalg.svd(eq_jac, compute_uv=False)
        eq_rank_ok = bool(sv.size and sv[-1] > 1e-9 * max(1.0, sv[0])) and eq_jac.shape[0] <= eq_jac.shape[1]
    else:
        eq_rank_ok = True

    nvar = nlp.dim
    # variables: (d, s); maximize s
    c = np.zeros(nvar + 1)
    c[-1] = -1.0
    a_ub = None
    b_ub = None
    if act_jac.shape[0]:
        a_ub = np.hstack([act_jac, np.ones((act_jac.shape[0], 1))])
        b_ub = np.zeros(act_jac.shape[0])
    a_eq = None
    b_eq = None
    if eq_jac.shape[0]:
        a_eq = np.hstack([eq_jac, np.zeros((eq_jac.shape[0], 1))])
        b_eq = np.zeros(eq_jac.shape[0])
    bounds = [(-1.0, 1.0)] * nvar + [(0.0, 1.0)]
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if not res.success:
        return MfcqReport(False, 0.0, None, eq_rank_ok, eq_jac.shape[0], active_tags)
    s_star = float(-res.fun)
    direction = np.asarray(res.x[:-1])
    ok_dir, eq_slope, act_slope, _ = validate_mfcq_direction(
        nlp, point, direction, active_tol=active_tol
    )
    holds = bool(s_star > 1e-9 and eq_rank_ok and ok_dir)
    return MfcqReport(
        holds=holds,
        s_star=s_star,
        direction=direction,
        eq_rank_ok=eq_rank_ok,
        n_equalities=eq_jac.shape[0],
        active_rows=active_tags,
        max_eq_slope=eq_slope,
        max_active_slope=act_slope,
    )


# ---------------------------------------------------------------------------
# Weak / strong duality


@dataclass
class DualityReport:
    kind: DualKind
    x: np.ndarray
    primal: float
    dual_best: float
    weak_ok: bool
    strong_ok: bool
    status: str  # ok | inconclusive | primal_failed
    dual_points: int = 0

    @property
    def gap(self) -> float:
        return self.primal - self.dual_best


def check_weak_duality(
    problem: BilevelProblem,
    x,
    kind: DualKind,
    *,
    n_starts: int = 3,
    seed: int = 0,
    weak_tol: float = 1e-6,
    strong_tol: float = 1e-5,
) -> DualityReport:
    """Solve the lower level and its dual; compare the optimal values.

    The primal optimum lifts to a dual-feasible start, so the best dual value
    found is a genuine lower bound witness; under convexity it must close the
    gap to ``strong_tol``.
    """
    x = np.asarray(x, dtype=float)
    lower = solve_convex_lower(problem, x)
    if not lower.ok:
        return DualityReport(kind, x, np.nan, np.nan, False, False, "primal_failed")
    primal = lower.value
    dual = build_dual(problem, x, kind)

    starts = [np.concatenate([lower.y, lower.u, lower.v])]
    rng = np.random.default_rng(seed)
    for _ in range(max(0, n_starts - 1)):
        starts.append(starts[0] + rng.normal(scale=0.1, size=dual.dim))

    best = -np.inf
    found = 0
    for s0 in starts:
        sol = solve_nlp(dual, s0, tol=1e-9, max_iter=200)
        if dual.max_violation(sol.point) > 1e-6:
            continue
        found += 1
        best = max(best, dual.objective(sol.point))
    if found == 0:
        return DualityReport(kind, x, primal, -np.inf, False, False, "inconclusive")
    weak_ok = primal >= best - weak_tol
    strong_ok = abs(primal - best) <= strong_tol
    return DualityReport(kind, x, primal, best, weak_ok, strong_ok, "ok", found)


# ---------------------------------------------------------------------------
# Brute-force oracle for all-affine instances


@dataclass
class OracleResult:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray | None
    y: np.ndarray | None
    value: float
    pattern: tuple[int, ...] | None
    patterns_checked: int


def brute_force_bilevel(
    problem: BilevelProblem,
    *,
    max_inequalities: int = 14,
    force: bool = False,
    optimality_tol: float = 1e-7,
) -> OracleResult:
    """Global solve of an all-affine instance by complementarity enumeration.

    Every on/off pattern of the lower inequalities pins rows of the KKT-based
    reformulation, leaving an LP over ``(x, y, u, v)``.  A pattern's candidate
    counts only after an independent lower-level optimality check
    ``f(x, y) <= V(x) + tol``, which guards against degenerate patterns.  Ties
    go to the lexicographically smallest pattern.
    """
    if not (problem.lower_is_linear() and problem.upper_objective.is_affine):
        raise AnalysisError("the oracle handles all-affine instances only")
    p = problem.p
    if p > max_inequalities and not force:
        raise AnalysisError(
            f"{p} lower inequalities would need 2^{p} patterns; pass force=True to override"
        )
    n, m, q = problem.n, problem.m, problem.q
    zero_x, zero_y = np.zeros(n), np.zeros(m)
    up_a, up_b = problem.upper.rows()
    jg_x, jg_y = problem.g_jac(zero_x, zero_y)
    jh_x, jh_y = problem.h_jac(zero_x, zero_y)
    g0 = problem.g_values(zero_x, zero_y)
    h0 = problem.h_values(zero_x, zero_y)
    d2 = problem.lower_objective.grad_y(zero_x, zero_y)
    fobj = problem.upper_objective
    c = np.concatenate([fobj.grad_x(zero_x, zero_y), fobj.grad_y(zero_x, zero_y), np.zeros(p + q)])

    nv = n + m + p + q
    a_ub_rows = [np.hstack([up_a, np.zeros((up_a.shape[0], m + p + q))])]
    b_ub_rows = [up_b]
    if p:
        a_ub_rows.append(np.hstack([jg_x, jg_y, np.zeros((p, p + q))]))
        b_ub_rows.append(-g0)
    a_ub = np.vstack(a_ub_rows)
    b_ub = np.concatenate(b_ub_rows)

    a_eq_base = []
    b_eq_base = []
    if q:
        a_eq_base.append(np.hstack([jh_x, jh_y, np.zeros((q, p + q))]))
        b_eq_base.append(-h0)
    stat = np.hstack([np.zeros((m, n + m)), jg_y.T, jh_y.T])
    a_eq_base.append(stat)
    b_eq_base.append(-d2)

    best: OracleResult | None = None
    unbounded = False
    checked = 0
    for pattern in itertools.product((0, 1), repeat=p):
        checked += 1
        bounds = [(None, None)] * (n + m)
        for i in range(p):
            bounds.append((0.0, None) if pattern[i] else (0.0, 0.0))
        bounds.extend([(None, None)] * q)
        a_eq = list(a_eq_base)
        b_eq = list(b_eq_base)
        tight = [i for i in range(p) if pattern[i]]
        if tight:
            rows = np.hstack([jg_x[tight], jg_y[tight], np.zeros((len(tight), p + q))])
            a_eq.append(rows)
            b_eq.append(-g0[tight])
        res = linprog(
            c,
            A_ub=a_ub,
            b_ub=b_ub,
            A_eq=np.vstack(a_eq),
            b_eq=np.concatenate(b_eq),
            bounds=bounds,
            method="highs",
        )
        if res.status == 3:
            unbounded = True
            continue
        if not res.success:
            continue
        sol = np.asarray(res.x)
        x, y = sol[:n], sol[n : n + m]
        lower = solve_convex_lower(problem, x)
        if not lower.ok:
            continue
        fxy = problem.lower_objective.value(x, y)
        if fxy > lower.value + optimality_tol:
            continue
        value = fobj.value(x, y)
        if best is None or value < best.value - 1e-12:
            best = OracleResult("optimal", x, y, value, pattern, checked)
    if unbounded and (best is None or best.value == -np.inf):
        return OracleResult("unbounded", None, None, -np.inf, None, checked)
    if best is None:
        return OracleResult("infeasible", None, None, np.inf, None, checked)
    best.patterns_checked = checked
    return best


# ---------------------------------------------------------------------------
# Region-embedding checks


def mfcq_candidate_points(problem: BilevelProblem, x, kind: ReformulationKind,
                          *, sqp_iters: int = 150) -> list[np.ndarray]:
    """Feasible points of a duality-based build worth testing for the MFCQ.

    Returns the lifted lower-level solution, the SQP output started from it,
    and (for quadratic-program lower levels) a family built from restricted
    dual solves: minimizing the lower objective subject to a chosen subset of
    inequalities pinned to equality yields dual-feasible ``(z, u, v)`` whose
    inactive rows sit strictly on the right side, which is exactly the
    geometry the componentwise-sign builds need.
    """
    x = np.asarray(x, dtype=float)
    lower = solve_convex_lower(problem, x)
    if not lower.ok:
        return []
    nlp = build(problem, kind)
    lifted = np.concatenate([x, lower.y, lower.y, lower.u, lower.v])
    candidates = []
    if nlp.max_violation(lifted) <= _ACTIVE_TOL:
        candidates.append(lifted)
    sol = solve_nlp(nlp, lifted, tol=1e-9, max_iter=sqp_iters)
    if nlp.max_violation(sol.point) <= _ACTIVE_TOL:
        candidates.append(sol.point)

    if problem.lower_is_quadratic_program() and problem.p <= 12:
        zero_y = np.zeros(problem.m)
        hess = problem.lower_objective.hess_yy(x, zero_y)
        grad0 = problem.lower_objective.grad_y(x, zero_y)
        _, jg = problem.g_jac(x, zero_y)
        _, jh = problem.h_jac(x, zero_y)
        g0 = problem.g_values(x, zero_y)
        h0 = problem.h_values(x, zero_y)
        for mask in range(1 << problem.p):
            subset = [i for i in range(problem.p) if mask >> i & 1]
            rows = np.vstack([jg[subset], jh]) if subset else jh
            rhs = np.concatenate([-g0[subset], -h0]) if subset else -h0
            k = rows.shape[0]
            kkt = np.zeros((problem.m + k, problem.m + k))
            kkt[: problem.m, : problem.m] = hess + 1e-12 * np.eye(problem.m)
            kkt[: problem.m, problem.m :] = rows.T
            kkt[problem.m :, : problem.m] = rows
            try:
                sol_kkt = np.linalg.solve(kkt, np.concatenate([-grad0, rhs]))
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(sol_kkt)):
                continue
            z = sol_kkt[: problem.m]
            mult = sol_kkt[problem.m :]
            u = np.zeros(problem.p)
            u[subset] = mult[: len(subset)]
            v = mult[len(subset) :]
            if np.min(u[subset], initial=1.0) <= 1e-9:
                continue
            outside = [i for i in range(problem.p) if i not in subset]
            gz = problem.g_values(x, z)
            if outside and np.min(gz[outside]) <= 1e-9:
                continue
            w = np.concatenate([x, lower.y, z, u, v])
            if nlp.max_violation(w) <= _ACTIVE_TOL:
                candidates.append(w)
    return candidates


INCLUSION_PAIRS: tuple[tuple[ReformulationKind, ReformulationKind], ...] = (
    (K.eMDP, K.MDP),
    (K.MDP, K.WDP),
    (K.eTMDP, K.TMDP),
    (K.TMDP, K.TWDP),
    (K.TWDP, K.WDP),
    (K.TMDP, K.MDP),
    (K.eTMDP, K.eMDP),
)


def sample_lifted_points(problem: BilevelProblem, count: int, seed: int = 0) -> list[np.ndarray]:
    """Feasible points of every duality-based region: lifted lower solutions."""
    rng = np.random.default_rng(seed)
    from .nlp import project_upper

    points = []
    attempts = 0
    while len(points) < count and attempts < 20 * count + 20:
        attempts += 1
        raw = rng.uniform(-10.0, 10.0, size=problem.n)
        x = project_upper(problem.upper, raw)
        lower = solve_convex_lower(problem, x)
        if not lower.ok:
            continue
        points.append(np.concatenate([x, lower.y, lower.y, lower.u, lower.v]))
    return points


def check_embeddings(problem: BilevelProblem, points, tol: float = 1e-9):
    """Residual transfer over the inclusion lattice on candidate points.

    Returns (checked, violations); a violation is (pair, point index, residual
    of the looser region) for a point that satisfied the tighter region.
    """
    nlps = {kind: build(problem, kind) for kind in DUALITY_KINDS}
    checked = 0
    violations = []
    for idx, w in enumerate(points):
        for tight, loose in INCLUSION_PAIRS:
            if nlps[tight].max_violation(w) <= tol:
                checked += 1
                resid = nlps[loose].max_violation(w)
                if resid > tol:
                    violations.append(((tight.value, loose.value), idx, resid))
    return checked, violations
