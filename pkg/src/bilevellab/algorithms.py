"""Direct and relaxation drivers with the projection epilogue.

Both drivers share the same skeleton: solve the lower level at a starting
upper point, lift that solution to a start for the reformulation NLP, run the
SQP solver, then measure infeasibility of the candidate against the original
bilevel program.  A candidate that misses the tolerance is projected back
onto the upper set and re-completed by a fresh lower-level solve, which makes
the output feasible whenever the lower level is solvable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import BilevelProblem
from .nlp import project_upper, solve_convex_lower, solve_nlp
from .reformulate import ReformulationError, ReformulationKind, build

__all__ = [
    "AlgoConfig",
    "RunRecord",
    "InfeasibilityBreakdown",
    "infeasibility",
    "infeasibility_breakdown",
    "relaxation_gap",
    "t_schedule",
    "run_direct",
    "run_relaxation",
    "CSV_HEADER",
]

CSV_HEADER = "instance,kind,algo,objval,infeas,time_s,projected,status,weakened"


@dataclass(frozen=True)
class AlgoConfig:
    """Tolerances and schedule parameters shared by both drivers."""

    eps_sqp: float = 1e-8
    eps_inf: float = 1e-5
    eps_inf_weak: float = 1e-4
    eps_r: float = 1e-6
    t0: float = 1.0
    sigma: float = 0.1
    max_outer: int = 60
    x0_source: str = "origin-projected"  # or "seeded-random"
    max_retries: int = 3
    sqp_max_iter: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise ValueError(f"sigma must lie in (0, 1), got {self.sigma}")
        for name in ("eps_sqp", "eps_inf", "eps_inf_weak", "eps_r", "t0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.x0_source not in ("origin-projected", "seeded-random"):
            raise ValueError(f"unknown x0 source {self.x0_source!r}")


@dataclass
class RunRecord:
    """One (instance, reformulation, algorithm) result."""

    instance: str
    kind: ReformulationKind
    algo: str  # direct | relaxation
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    u: np.ndarray
    v: np.ndarray
    objective: float
    infeasibility: float
    projected: bool
    outer_iterations: int
    wall_time: float
    status: str  # accepted | failed
    weakened: bool = False
    tolerance: float = field(default=1e-5)

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    def to_csv_row(self) -> str:
        return (
            f"{self.instance},{self.kind.value},{self.algo},"
            f"{self.objective!r},{self.infeasibility!r},{self.wall_time:.6f},"
            f"{int(self.projected)},{self.status},{int(self.weakened)}"
        )


@dataclass(frozen=True)
class InfeasibilityBreakdown:
    total: float
    distance_to_upper: float
    g_violation: float
    h_violation: float
    value_gap: float
    status: str  # ok | lower_infeasible | lower_failed


def infeasibility_breakdown(problem: BilevelProblem, x, y) -> InfeasibilityBreakdown:
    """The composite measure: projection distance + constraint norms + |f - V|."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    x_proj = project_upper(problem.upper, x)
    dist = float(np.linalg.norm(x - x_proj))
    gv = problem.g_values(x, y) if problem.p else np.zeros(0)
    hv = problem.h_values(x, y) if problem.q else np.zeros(0)
    g_term = float(np.linalg.norm(np.maximum(gv, 0.0))) if gv.size else 0.0
    h_term = float(np.linalg.norm(hv)) if hv.size else 0.0
    lower = solve_convex_lower(problem, x)
    if not lower.ok:
        status = "lower_infeasible" if lower.status == "infeasible" else "lower_failed"
        return InfeasibilityBreakdown(np.inf, dist, g_term, h_term, np.inf, status)
    gap = abs(problem.lower_objective.value(x, y) - lower.value)
    total = dist + g_term + h_term + gap
    return InfeasibilityBreakdown(total, dist, g_term, h_term, gap, "ok")


def infeasibility(problem: BilevelProblem, x, y) -> float:
    return infeasibility_breakdown(problem, x, y).total


def t_schedule(config: AlgoConfig) -> list[float]:
    """The relaxation parameters t_0, t_1, ... down to the floor eps_r."""
    ts = [config.t0]
    # relative guard so accumulated rounding cannot add a duplicate floor step
    while ts[-1] > config.eps_r * (1.0 + 1e-12) and len(ts) < config.max_outer:
        ts.append(max(config.sigma * ts[-1], config.eps_r))
    return ts


def relaxation_gap(problem: BilevelProblem, kind: ReformulationKind, x, y, z, u, v) -> float:
    """The kind-specific residual used as the relaxation termination test."""
    K = ReformulationKind
    if kind is K.MPCC:
        return abs(float(u @ problem.g_values(x, y))) if problem.p else 0.0
    gap = problem.lower_objective.value(x, y) - problem.lower_objective.value(x, z)
    if kind in (K.WDP, K.TWDP) and problem.p:
        gap -= float(u @ problem.g_values(x, z))
    if kind is K.WDP and problem.q:
        gap -= float(v @ problem.h_values(x, z))
    return abs(gap)


def _initial_x(problem: BilevelProblem, config: AlgoConfig, attempt: int) -> np.ndarray:
    if attempt == 0 and config.x0_source == "origin-projected":
        return project_upper(problem.upper, np.zeros(problem.n))
    rng = np.random.default_rng((config.seed, attempt))
    raw = rng.uniform(-10.0, 10.0, size=problem.n)
    return project_upper(problem.upper, raw)


def _lift(kind: ReformulationKind, x, lower) -> np.ndarray:
    parts = [x, lower.y] if kind is ReformulationKind.MPCC else [x, lower.y, lower.y]
    return np.concatenate(parts + [lower.u, lower.v])


def _failed_record(instance, kind, algo, problem, outer, t0) -> RunRecord:
    zeros = np.zeros
    return RunRecord(
        instance=instance,
        kind=kind,
        algo=algo,
        x=zeros(problem.n),
        y=zeros(problem.m),
        z=zeros(problem.m),
        u=zeros(problem.p),
        v=zeros(problem.q),
        objective=float("nan"),
        infeasibility=float("inf"),
        projected=False,
        outer_iterations=outer,
        wall_time=time.perf_counter() - t0,
        status="failed",
    )


def _epilogue(problem, config, instance, kind, algo, w, layout, outer, t0):
    """Infeasibility test, projection fallback, and acceptance ladder.

    Returns a RunRecord, or None when the lower level failed at the projected
    point and the caller should retry from a fresh start.
    """
    x, y, z, u, v = layout.split(w)
    if z is None:
        z = y
    measured = infeasibility_breakdown(problem, x, y)
    projected = False
    if not measured.total <= config.eps_inf:
        x_star = project_upper(problem.upper, x)
        lower = solve_convex_lower(problem, x_star)
        if not lower.ok:
            return None
        x, y, z, u, v = x_star, lower.y, lower.y, lower.u, lower.v
        measured = infeasibility_breakdown(problem, x, y)
        projected = True

    weakened = False
    tolerance = config.eps_inf
    if measured.total <= config.eps_inf:
        status = "accepted"
    elif measured.total <= config.eps_inf_weak:
        status = "accepted"
        weakened = True
        tolerance = config.eps_inf_weak
    else:
        status = "failed"
    return RunRecord(
        instance=instance,
        kind=kind,
        algo=algo,
        x=np.array(x),
        y=np.array(y),
        z=np.array(z),
        u=np.array(u),
        v=np.array(v),
        objective=problem.upper_objective.value(x, y),
        infeasibility=measured.total,
        projected=projected,
        outer_iterations=outer,
        wall_time=time.perf_counter() - t0,
        status=status,
        weakened=weakened,
        tolerance=tolerance,
    )


def run_direct(
    problem: BilevelProblem,
    kind: ReformulationKind,
    config: AlgoConfig = AlgoConfig(),
    *,
    instance: str = "",
    x0=None,
    trace=None,
) -> RunRecord:
    """Solve the unrelaxed reformulation once, then project if needed."""
    t0 = time.perf_counter()
    nlp = build(problem, kind)
    for attempt in range(config.max_retries + 1):
        x_init = (
            np.asarray(x0, dtype=float)
            if (x0 is not None and attempt == 0)
            else _initial_x(problem, config, attempt)
        )
        lower = solve_convex_lower(problem, x_init)
        if not lower.ok:
            continue
        start = _lift(kind, x_init, lower)
        sol = solve_nlp(nlp, start, tol=config.eps_sqp, max_iter=config.sqp_max_iter, trace=trace)
        record = _epilogue(
            problem, config, instance, kind, "direct", sol.point, nlp.layout, 1, t0
        )
        if record is not None:
            return record
    return _failed_record(instance, kind, "direct", problem, 1, t0)


def run_relaxation(
    problem: BilevelProblem,
    kind: ReformulationKind,
    config: AlgoConfig = AlgoConfig(),
    *,
    instance: str = "",
    x0=None,
    trace=None,
) -> RunRecord:
    """Drive the relaxed reformulations Q(t) along t_{k+1} = max(sigma t_k, eps_r)."""
    if not isinstance(kind, ReformulationKind):
        raise ReformulationError(f"kind must be a ReformulationKind, got {kind!r}")
    t0_clock = time.perf_counter()
    schedule = t_schedule(config)
    for attempt in range(config.max_retries + 1):
        x_tilde = (
            np.asarray(x0, dtype=float)
            if (x0 is not None and attempt == 0)
            else _initial_x(problem, config, attempt)
        )
        w = None
        layout = None
        failed_lower = False
        outer = 0
        for outer in range(1, min(config.max_outer, len(schedule)) + 1):
            t = schedule[outer - 1]
            lower = solve_convex_lower(problem, x_tilde)
            if not lower.ok:
                failed_lower = True
                break
            nlp_t = build(problem, kind, t)
            layout = nlp_t.layout
            start = _lift(kind, x_tilde, lower)
            sol = solve_nlp(
                nlp_t, start, tol=config.eps_sqp, max_iter=config.sqp_max_iter, trace=trace
            )
            w = sol.point
            x, y, z, u, v = layout.split(w)
            gap = relaxation_gap(problem, kind, x, y, y if z is None else z, u, v)
            if t <= config.eps_r or gap <= config.eps_r:
                break
            x_tilde = np.array(x)
        if failed_lower or w is None:
            continue
        record = _epilogue(
            problem, config, instance, kind, "relaxation", w, layout, outer, t0_clock
        )
        if record is not None:
            return record
    return _failed_record(instance, kind, "relaxation", problem, 0, t0_clock)


def with_overrides(config: AlgoConfig, **kwargs) -> AlgoConfig:
    """A copy of ``config`` with selected fields replaced."""
    return replace(config, **kwargs)
