"""Smooth-NLP and convex-subproblem solvers."""

from .convex import ConvexSolveResult, project_upper, solve_convex_lower
from .qp import QpResult, solve_qp
from .sqp import NlpSolution, kkt_residual_parts, solve_nlp

__all__ = [
    "ConvexSolveResult",
    "NlpSolution",
    "QpResult",
    "kkt_residual_parts",
    "project_upper",
    "solve_convex_lower",
    "solve_nlp",
    "solve_qp",
]
