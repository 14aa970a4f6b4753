"""SQP solver: closed forms, fixture problems, statuses, and the KKT contract."""

import numpy as np
import pytest

from bilevellab.nlp import solve_convex_lower, solve_nlp
from bilevellab.nlp.sqp import kkt_residual_parts
from bilevellab.reformulate import build


class _SimpleNlp:
    """Small hand-rolled problem for driving the solver directly."""

    def __init__(self, dim, objective, ineqs=(), eqs=()):
        self.dim = dim
        self._obj = objective
        self._ineqs = list(ineqs)
        self._eqs = list(eqs)

    def eval_objective(self, w):
        return self._obj(w)

    def eval_constraints(self, w):
        ci = np.array([f(w)[0] for f in self._ineqs])
        ji = (
            np.vstack([f(w)[1] for f in self._ineqs])
            if self._ineqs
            else np.zeros((0, self.dim))
        )
        ce = np.array([f(w)[0] for f in self._eqs])
        je = (
            np.vstack([f(w)[1] for f in self._eqs])
            if self._eqs
            else np.zeros((0, self.dim))
        )
        return ci, ji, ce, je


def test_single_active_constraint():
    """min (x-1)^2 s.t. x >= 2 from x=5: optimum 2 with multiplier 2."""
    nlp = _SimpleNlp(
        1,
        lambda w: ((w[0] - 1.0) ** 2, np.array([2.0 * (w[0] - 1.0)])),
        ineqs=[lambda w: (2.0 - w[0], np.array([-1.0]))],
    )
    sol = solve_nlp(nlp, np.array([5.0]), tol=1e-8)
    assert sol.status == "kkt_ok"
    assert sol.kkt_residual <= 1e-8
    np.testing.assert_allclose(sol.point, [2.0], atol=1e-8)
    np.testing.assert_allclose(sol.mult_ineq, [2.0], atol=1e-6)


def test_equality_constrained_quadratic_matches_normal_equations():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 6))
    b = rng.normal(size=3)
    expected = a.T @ np.linalg.solve(a @ a.T, b)
    nlp = _SimpleNlp(
        6,
        lambda w: (0.5 * w @ w, w.copy()),
        eqs=[
            (lambda w, i=i: (a[i] @ w - b[i], a[i].copy()))
            for i in range(3)
        ],
    )
    sol = solve_nlp(nlp, np.zeros(6), tol=1e-10)
    assert sol.status == "kkt_ok"
    np.testing.assert_allclose(sol.point, expected, atol=1e-8)


def test_demo_reformulation_reaches_global_value(demo_cubic_objective):
    """The tightened Mond-Weir build from a lifted lower solve lands on value 0."""
    problem = demo_cubic_objective.problem
    x0 = np.array([0.0])
    lower = solve_convex_lower(problem, x0)
    assert lower.ok
    nlp = build(problem, demo_cubic_objective.kind)
    start = np.concatenate([x0, lower.y, lower.y, lower.u, lower.v])
    sol = solve_nlp(nlp, start, tol=1e-8)
    x, y, *_ = nlp.layout.split(sol.point)
    value = problem.upper_objective.value(x, y)
    assert value == pytest.approx(0.0, abs=1e-8)
    assert nlp.max_violation(sol.point) <= 1e-8


def test_kkt_ok_invariant_holds_on_return(demo_cubic_constraint):
    problem = demo_cubic_constraint.problem
    x0 = np.array([1.0])
    lower = solve_convex_lower(problem, x0)
    nlp = build(problem, demo_cubic_constraint.kind)
    start = np.concatenate([x0, lower.y, lower.y, lower.u, lower.v])
    sol = solve_nlp(nlp, start, tol=1e-8)
    assert sol.status == "kkt_ok"
    # re-derive every residual component independently of the solver's report
    _, grad = nlp.eval_objective(sol.point)
    ci, ji, ce, je = nlp.eval_constraints(sol.point)
    stat, feas, comp, dual = kkt_residual_parts(grad, ci, ji, ce, je, sol.mult_ineq, sol.mult_eq)
    assert max(stat, feas, comp, dual) <= 1e-8


def test_contradictory_constraints_do_not_crash():
    nlp = _SimpleNlp(
        1,
        lambda w: (w[0] ** 2, np.array([2.0 * w[0]])),
        ineqs=[
            lambda w: (w[0] - 0.0, np.array([1.0])),  # x <= 0
            lambda w: (1.0 - w[0], np.array([-1.0])),  # x >= 1
        ],
    )
    sol = solve_nlp(nlp, np.array([0.5]), tol=1e-8, max_iter=60)
    assert sol.status != "kkt_ok"
    assert sol.constraint_violation > 1e-3  # no feasible point exists


def test_trace_lines_are_csv(demo_cubic_objective):
    problem = demo_cubic_objective.problem
    lower = solve_convex_lower(problem, np.array([0.5]))
    nlp = build(problem, demo_cubic_objective.kind)
    start = np.concatenate([np.array([0.5]), lower.y, lower.y, lower.u, lower.v])
    lines = []
    solve_nlp(nlp, start, tol=1e-8, trace=lines.append)
    for line in lines:
        fields = line.split(",")
        assert len(fields) == 4
        int(fields[0])
        for value in fields[1:]:
            float(value)


def test_bad_start_shape_rejected(demo_cubic_objective):
    nlp = build(demo_cubic_objective.problem, demo_cubic_objective.kind)
    with pytest.raises(ValueError):
        solve_nlp(nlp, np.zeros(3))


def test_multipliers_woven_in_row_order(demo_cubic_objective):
    problem = demo_cubic_objective.problem
    lower = solve_convex_lower(problem, np.array([0.0]))
    nlp = build(problem, demo_cubic_objective.kind)
    start = np.concatenate([np.array([0.0]), lower.y, lower.y, lower.u, lower.v])
    sol = solve_nlp(nlp, start, tol=1e-8)
    assert sol.multipliers.shape == (nlp.n_rows,)
    lam_in, lam_eq = nlp.split_multipliers(sol.multipliers)
    np.testing.assert_array_equal(lam_in, sol.mult_ineq)
    np.testing.assert_array_equal(lam_eq, sol.mult_eq)
