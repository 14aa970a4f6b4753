"""Two small hand-built demo problems with cubic terms.

Both have closed-form lower-level solutions and a known global optimum with
upper value 0, and both come with a reference point at which the matching
duality-based reformulation satisfies the MFCQ, plus a certificate direction.
They are the regression fixtures for the MFCQ checker and the run drivers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BilevelProblem, ConstraintBlock, Monomial, ScalarFunc, UpperSet
from .reformulate import ReformulationKind

__all__ = ["DemoProblem", "cubic_constraint_demo", "cubic_objective_demo"]


@dataclass(frozen=True)
class DemoProblem:
    name: str
    problem: BilevelProblem
    kind: ReformulationKind
    reference_point: np.ndarray
    mfcq_direction: np.ndarray
    best_upper_value: float
    best_xy: tuple[np.ndarray, np.ndarray]


def cubic_constraint_demo() -> DemoProblem:
    """min (x - y1 - 8)^2 over x >= 1 with the lower level
    min {y1 - y2 : y1^3 <= x, y1 >= 0, y1 + y2 - x = 0}.

    The lower solution is y = (0, x), the global optimum sits at x = 8 with
    upper value 0.  The reference point is a global solution of the tightened
    Wolfe reformulation where the MFCQ holds.
    """
    n, m = 1, 2
    upper_obj = ScalarFunc(
        n,
        m,
        qxx=[[2.0]],
        qxy=[[-2.0, 0.0]],
        qyy=[[2.0, 0.0], [0.0, 0.0]],
        cx=[-16.0],
        cy=[16.0, 0.0],
        c0=64.0,
    )
    lower_obj = ScalarFunc(n, m, cy=[1.0, -1.0])
    g1 = ScalarFunc(n, m, cx=[-1.0], monomials=[Monomial("y", 0, 3, 1.0)])  # y1^3 - x
    g2 = ScalarFunc(n, m, cy=[-1.0, 0.0])  # -y1
    h1 = ScalarFunc(n, m, cx=[-1.0], cy=[1.0, 1.0])  # y1 + y2 - x
    upper = UpperSet([[-1.0]], [-1.0])  # x >= 1
    problem = BilevelProblem(
        n=n,
        m=m,
        upper_objective=upper_obj,
        lower_objective=lower_obj,
        lower=ConstraintBlock([g1, g2], [h1]),
        upper=upper,
        convex_lower=True,
    )
    return DemoProblem(
        name="cubic-constraint",
        problem=problem,
        kind=ReformulationKind.TWDP,
        reference_point=np.array([8.0, 0.0, 8.0, -2.0, 10.0, 0.0, 2.0, 1.0]),
        mfcq_direction=np.array([1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 12.0, 0.0]),
        best_upper_value=0.0,
        best_xy=(np.array([8.0]), np.array([0.0, 8.0])),
    )


def cubic_objective_demo() -> DemoProblem:
    """min (x + y1 + y2)^2 over x in [-1, 1] with the lower level
    min {y1^3 - 3*y1 : y1 >= x, y1 + y2 - x = 0}.

    The lower solution is y = (1, x - 1), the global optimum sits at x = 0
    with upper value 0.  The tightened Mond-Weir reformulation (its extended
    variant builds the same rows here since p = 1) satisfies the MFCQ at the
    reference point.
    """
    n, m = 1, 2
    ones = np.ones((m, m))
    upper_obj = ScalarFunc(
        n,
        m,
        qxx=[[2.0]],
        qxy=[[2.0, 2.0]],
        qyy=2.0 * ones,
        cx=[0.0],
        cy=[0.0, 0.0],
        c0=0.0,
    )
    lower_obj = ScalarFunc(n, m, cy=[-3.0, 0.0], monomials=[Monomial("y", 0, 3, 1.0)])
    g1 = ScalarFunc(n, m, cx=[1.0], cy=[-1.0, 0.0])  # x - y1
    h1 = ScalarFunc(n, m, cx=[-1.0], cy=[1.0, 1.0])  # y1 + y2 - x
    upper = UpperSet([[1.0], [-1.0]], [1.0, 1.0])  # -1 <= x <= 1
    problem = BilevelProblem(
        n=n,
        m=m,
        upper_objective=upper_obj,
        lower_objective=lower_obj,
        lower=ConstraintBlock([g1], [h1]),
        upper=upper,
        convex_lower=True,
    )
    return DemoProblem(
        name="cubic-objective",
        problem=problem,
        kind=ReformulationKind.TMDP,
        reference_point=np.array([0.0, 1.0, -1.0, -2.0, 2.0, 9.0, 0.0]),
        mfcq_direction=np.array([0.0, 0.0, 0.0, 1.0, -1.0, -12.0, 0.0]),
        best_upper_value=0.0,
        best_xy=(np.array([0.0]), np.array([1.0, -1.0])),
    )
