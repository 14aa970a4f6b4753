"""Structured function evaluation, derivative blocks, and problem invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevellab.model import (
    BilevelProblem,
    ConstraintBlock,
    DimensionError,
    ModelError,
    Monomial,
    ScalarFunc,
    StackedFuncs,
    UpperSet,
    lagrangian,
)

from conftest import central_diff, tiny_problem


class TestScalarFunc:
    def test_zero_affine_evaluates_to_zero(self):
        f = ScalarFunc(2, 3)
        assert f.value([5.0, -1.0], [2.0, 0.0, 7.0]) == 0.0
        assert f.kind == "affine"

    def test_demo_lower_objective_value(self, demo_cubic_constraint):
        f = demo_cubic_constraint.problem.lower_objective
        assert f.value([8.0], [0.0, 8.0]) == pytest.approx(-8.0, abs=0)

    def test_quadratic_value_and_gradient_against_finite_differences(self):
        m = 2
        f = ScalarFunc(1, m, qyy=2.0 * np.eye(m))
        y = np.array([1.0, 1.0])
        assert f.value([0.0], y) == pytest.approx(2.0)
        grad = f.grad_y([0.0], y)
        np.testing.assert_allclose(grad, [2.0, 2.0])
        fd = central_diff(lambda yy: f.value([0.0], yy), y)
        np.testing.assert_allclose(grad, fd, atol=1e-6)

    def test_constant_recovered_at_origin(self):
        f = ScalarFunc(2, 2, qxx=np.eye(2), qyy=np.eye(2), c0=3.25)
        assert f.value([0, 0], [0, 0]) == 3.25

    def test_symmetrization_at_construction(self):
        f = ScalarFunc(0, 2, qyy=[[1.0, 2.0], [0.0, 1.0]])
        np.testing.assert_allclose(f.qyy, f.qyy.T)
        rel = np.abs(f.qyy - f.qyy.T).max() / max(1.0, np.abs(f.qyy).max())
        assert rel <= 1e-12

    def test_kind_classification(self):
        assert ScalarFunc(1, 1, cy=[1.0]).kind == "affine"
        assert ScalarFunc(1, 1, qyy=[[1.0]]).kind == "quadratic"
        cubic = ScalarFunc(1, 1, monomials=[Monomial("y", 0, 3, 1.0)])
        assert cubic.kind == "polynomial"

    def test_monomial_derivatives(self):
        f = ScalarFunc(1, 2, monomials=[Monomial("y", 0, 3, 2.0)])
        y = np.array([1.5, -0.5])
        assert f.value([0.0], y) == pytest.approx(2.0 * 1.5**3)
        np.testing.assert_allclose(
            f.grad_y([0.0], y), [6.0 * 1.5**2, 0.0]
        )
        hess = f.hess_yy([0.0], y)
        assert hess[0, 0] == pytest.approx(12.0 * 1.5)

    def test_fix_x_matches_direct_evaluation(self):
        rng = np.random.default_rng(3)
        f = ScalarFunc(
            2,
            3,
            qxx=rng.normal(size=(2, 2)),
            qxy=rng.normal(size=(2, 3)),
            qyy=rng.normal(size=(3, 3)),
            cx=rng.normal(size=2),
            cy=rng.normal(size=3),
            c0=0.7,
            monomials=[Monomial("x", 0, 3, 0.5), Monomial("y", 1, 2, -1.0)],
        )
        x = rng.normal(size=2)
        fixed = f.fix_x(x)
        for _ in range(5):
            y = rng.normal(size=3)
            assert fixed.value(np.zeros(0), y) == pytest.approx(f.value(x, y), rel=1e-12)
            np.testing.assert_allclose(
                fixed.grad_y(np.zeros(0), y), f.grad_y(x, y), rtol=1e-12
            )

    def test_dimension_mismatch_raises(self):
        f = ScalarFunc(2, 2)
        with pytest.raises(DimensionError):
            f.value([1.0], [0.0, 0.0])
        with pytest.raises(DimensionError):
            ScalarFunc(2, 2, cx=[1.0, 2.0, 3.0])

    def test_evaluation_is_pure(self):
        f = ScalarFunc(1, 1, qyy=[[2.0]], cy=[1.0])
        x, y = np.array([0.5]), np.array([2.0])
        first = f.value(x, y)
        f.grad_y(x, y)
        assert f.value(x, y) == first


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradients_match_finite_differences(seed):
    """Analytic gradients agree with central differences on random functions."""
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    f = ScalarFunc(
        n,
        m,
        qxx=rng.uniform(-1, 1, (n, n)),
        qxy=rng.uniform(-1, 1, (n, m)),
        qyy=rng.uniform(-1, 1, (m, m)),
        cx=rng.uniform(-1, 1, n),
        cy=rng.uniform(-1, 1, m),
        c0=float(rng.uniform(-1, 1)),
        monomials=[Monomial("y", int(rng.integers(0, m)), 3, float(rng.uniform(-1, 1)))],
    )
    x = rng.uniform(-2, 2, n)
    y = rng.uniform(-2, 2, m)
    np.testing.assert_allclose(
        f.grad_x(x, y), central_diff(lambda xx: f.value(xx, y), x), atol=1e-5
    )
    np.testing.assert_allclose(
        f.grad_y(x, y), central_diff(lambda yy: f.value(x, yy), y), atol=1e-5
    )


class TestStackedFuncs:
    def test_values_and_jacobians_match_per_row(self):
        rng = np.random.default_rng(11)
        n, m = 2, 3
        funcs = [
            ScalarFunc(n, m, cx=rng.normal(size=n), cy=rng.normal(size=m), c0=1.0),
            ScalarFunc(n, m, qyy=np.eye(m), cy=rng.normal(size=m)),
            ScalarFunc(n, m, monomials=[Monomial("y", 2, 3, 0.3), Monomial("x", 0, 1, 2.0)]),
        ]
        stack = StackedFuncs(funcs, n, m)
        x, y = rng.normal(size=n), rng.normal(size=m)
        np.testing.assert_allclose(
            stack.values(x, y), [f.value(x, y) for f in funcs], rtol=1e-12
        )
        np.testing.assert_allclose(
            stack.jac_y(x, y), np.vstack([f.grad_y(x, y) for f in funcs]), rtol=1e-12
        )
        np.testing.assert_allclose(
            stack.jac_x(x, y), np.vstack([f.grad_x(x, y) for f in funcs]), rtol=1e-12
        )


class TestUpperSet:
    def test_empty_set_rejected_at_construction(self):
        # x <= -1 and x >= 1 conflict
        with pytest.raises(ModelError):
            UpperSet([[1.0], [-1.0]], [-1.0, -1.0])

    def test_bounds_fold_into_rows(self):
        us = UpperSet(np.zeros((0, 2)), [], lb=[-1.0, -2.0], ub=[3.0, 4.0])
        a, b = us.rows()
        assert a.shape == (4, 2)
        assert us.contains([0.0, 0.0])
        assert not us.contains([5.0, 0.0])

    def test_feasible_witness_is_member(self):
        us = UpperSet([[-1.0]], [-1.0])  # x >= 1
        assert us.contains(us.feasible_point(), tol=1e-7)


class TestBilevelProblem:
    def test_convexity_check_rejects_indefinite_objective(self):
        n, m = 1, 2
        bad = ScalarFunc(n, m, qyy=[[-1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ModelError):
            BilevelProblem(
                n=n,
                m=m,
                upper_objective=ScalarFunc(n, m),
                lower_objective=bad,
                lower=ConstraintBlock(),
                upper=UpperSet([[1.0]], [1.0]),
            )

    def test_convexity_check_rejects_nonaffine_equality(self):
        n, m = 1, 1
        quad_eq = ScalarFunc(n, m, qyy=[[1.0]])
        with pytest.raises(ModelError):
            BilevelProblem(
                n=n,
                m=m,
                upper_objective=ScalarFunc(n, m),
                lower_objective=ScalarFunc(n, m),
                lower=ConstraintBlock([], [quad_eq]),
                upper=UpperSet([[1.0]], [1.0]),
            )

    def test_convex_curvature_is_nonnegative_on_samples(self):
        problem = tiny_problem("II", seed=5)
        rng = np.random.default_rng(0)
        hess = problem.lower_objective.hess_yy(np.zeros(problem.n), np.zeros(problem.m))
        for _ in range(100):
            d = rng.normal(size=problem.m)
            assert 0.5 * d @ hess @ d >= -1e-9 * (d @ d)


class TestLagrangian:
    def test_zero_multipliers_reduce_to_objective(self, demo_cubic_constraint):
        problem = demo_cubic_constraint.problem
        x, z = np.array([8.0]), np.array([0.0, 8.0])
        val, grad = lagrangian(problem, x, z, np.zeros(2), np.zeros(1))
        assert val == pytest.approx(problem.lower_objective.value(x, z))
        np.testing.assert_allclose(grad, problem.lower_objective.grad_y(x, z))

    def test_demo_point_is_stationary(self, demo_cubic_constraint):
        problem = demo_cubic_constraint.problem
        _, grad = lagrangian(problem, [8.0], [0.0, 8.0], [0.0, 2.0], [1.0])
        np.testing.assert_allclose(grad, [0.0, 0.0], atol=1e-12)

    def test_gradient_matches_finite_differences_on_random_instance(self):
        problem = tiny_problem("II", seed=9)
        rng = np.random.default_rng(2)
        x = rng.normal(size=problem.n)
        z = rng.normal(size=problem.m)
        u = np.abs(rng.normal(size=problem.p))
        v = rng.normal(size=problem.q)
        _, grad = lagrangian(problem, x, z, u, v)
        fd = central_diff(lambda zz: lagrangian(problem, x, zz, u, v)[0], z)
        np.testing.assert_allclose(grad, fd, atol=1e-6)

    def test_dimension_mismatch(self, demo_cubic_constraint):
        problem = demo_cubic_constraint.problem
        with pytest.raises(DimensionError):
            lagrangian(problem, [8.0], [0.0], [0.0, 2.0], [1.0])
