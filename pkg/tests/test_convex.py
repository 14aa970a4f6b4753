"""Lower-level solves (LP / QP / NLP routes) and the projection operator."""

import numpy as np
import pytest

from bilevellab.model import BilevelProblem, ConstraintBlock, ScalarFunc, UpperSet
from bilevellab.nlp import project_upper, solve_convex_lower

from conftest import tiny_problem


class TestLowerSolve:
    def test_cubic_constraint_demo(self, demo_cubic_constraint):
        res = solve_convex_lower(demo_cubic_constraint.problem, [8.0])
        assert res.ok
        np.testing.assert_allclose(res.y, [0.0, 8.0], atol=1e-8)
        assert res.value == pytest.approx(-8.0, abs=1e-8)

    def test_cubic_objective_demo(self, demo_cubic_objective):
        res = solve_convex_lower(demo_cubic_objective.problem, [0.0])
        assert res.ok
        np.testing.assert_allclose(res.y, [1.0, -1.0], atol=1e-7)
        assert res.value == pytest.approx(-2.0, abs=1e-8)

    def test_symmetric_projection_onto_plane(self):
        # min 1/2 ||y||^2  s.t.  sum(y) = 1  with m = 4
        n, m = 1, 4
        problem = BilevelProblem(
            n=n,
            m=m,
            upper_objective=ScalarFunc(n, m),
            lower_objective=ScalarFunc(n, m, qyy=np.eye(m)),
            lower=ConstraintBlock([], [ScalarFunc(n, m, cy=np.ones(m), c0=-1.0)]),
            upper=UpperSet([[1.0]], [1.0]),
        )
        res = solve_convex_lower(problem, [0.0])
        assert res.ok
        np.testing.assert_allclose(res.y, 0.25 * np.ones(m), atol=1e-9)
        assert res.value == pytest.approx(0.125, abs=1e-9)
        np.testing.assert_allclose(res.v, [-0.25], atol=1e-7)

    @pytest.mark.parametrize("group", ["I", "II", "III"])
    def test_multiplier_contract_on_random_instances(self, group):
        problem = tiny_problem(group, seed=21)
        rng = np.random.default_rng(1)
        for _ in range(3):
            x = project_upper(problem.upper, rng.uniform(-3, 3, problem.n))
            res = solve_convex_lower(problem, x)
            if not res.ok:
                continue
            _, jy_g = problem.g_jac(x, res.y)
            _, jy_h = problem.h_jac(x, res.y)
            stat = problem.lower_objective.grad_y(x, res.y) + jy_g.T @ res.u + jy_h.T @ res.v
            assert np.linalg.norm(stat, np.inf) <= 1e-7
            assert np.min(res.u, initial=0.0) >= -1e-9
            gvals = problem.g_values(x, res.y)
            assert np.max(np.abs(res.u * gvals), initial=0.0) <= 1e-7

    def test_infeasible_lower_level_reported(self):
        n, m = 1, 1
        # equality 0*y = 1 is unsatisfiable
        problem = BilevelProblem(
            n=n,
            m=m,
            upper_objective=ScalarFunc(n, m),
            lower_objective=ScalarFunc(n, m, cy=[1.0]),
            lower=ConstraintBlock([], [ScalarFunc(n, m, c0=1.0)]),
            upper=UpperSet([[1.0]], [1.0]),
        )
        res = solve_convex_lower(problem, [0.0])
        assert res.status == "infeasible"

    def test_value_function_is_convex_along_segments(self):
        """Group-I V(x) must satisfy the convexity inequality on samples."""
        problem = tiny_problem("I", seed=33)
        rng = np.random.default_rng(4)
        for _ in range(5):
            x1 = project_upper(problem.upper, rng.uniform(-3, 3, problem.n))
            x2 = project_upper(problem.upper, rng.uniform(-3, 3, problem.n))
            theta = float(rng.uniform())
            xm = theta * x1 + (1 - theta) * x2
            r1, r2 = solve_convex_lower(problem, x1), solve_convex_lower(problem, x2)
            rm = solve_convex_lower(problem, xm)
            if not (r1.ok and r2.ok and rm.ok):
                continue
            assert rm.value <= theta * r1.value + (1 - theta) * r2.value + 1e-6


class TestProjection:
    def test_identity_on_members(self):
        us = UpperSet([[1.0, 0.0]], [5.0])
        x = np.array([1.0, 2.0])
        np.testing.assert_array_equal(project_upper(us, x), x)

    def test_halfline_projection(self, demo_cubic_constraint):
        us = demo_cubic_constraint.problem.upper  # x >= 1
        assert project_upper(us, [0.0]) == pytest.approx(1.0, abs=1e-9)

    def test_variational_inequality_certificate(self):
        rng = np.random.default_rng(17)
        a = rng.normal(size=(6, 3))
        witness = rng.normal(size=3)
        b = a @ witness + rng.uniform(0.1, 1.0, size=6)  # nonempty by construction
        us = UpperSet(a, b)
        for _ in range(10):
            raw = rng.normal(scale=4.0, size=3)
            proj = project_upper(us, raw)
            assert us.violation(proj) <= 1e-8
            # (raw - proj)'(z - proj) <= tol for sampled members z
            for _ in range(10):
                z = project_upper(us, rng.normal(scale=4.0, size=3))
                assert (raw - proj) @ (z - proj) <= 1e-8 * (1 + np.linalg.norm(raw))

    def test_idempotent_and_nonexpansive(self):
        rng = np.random.default_rng(23)
        a = rng.normal(size=(4, 2))
        b = a @ rng.normal(size=2) + rng.uniform(0.1, 1.0, size=4)
        us = UpperSet(a, b)
        for _ in range(10):
            p = rng.normal(scale=3.0, size=2)
            q = rng.normal(scale=3.0, size=2)
            pp, qq = project_upper(us, p), project_upper(us, q)
            np.testing.assert_allclose(project_upper(us, pp), pp, atol=1e-7)
            assert np.linalg.norm(pp - qq) <= np.linalg.norm(p - q) + 1e-8

    def test_shape_mismatch(self):
        us = UpperSet([[1.0]], [1.0])
        with pytest.raises(ValueError):
            project_upper(us, [1.0, 2.0])
