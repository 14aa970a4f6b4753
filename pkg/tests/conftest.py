"""Shared fixtures: finite-difference oracles and tiny instance factories."""

from __future__ import annotations

import numpy as np
import pytest

from bilevellab.bench import InstanceSpec, generate
from bilevellab.demos import cubic_constraint_demo, cubic_objective_demo
from bilevellab.model import BilevelProblem, ConstraintBlock, ScalarFunc, UpperSet


def central_diff(func, x, step: float = 1e-6) -> np.ndarray:
    """Independent gradient oracle: central differences component by component."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        grad[i] = (func(x + e) - func(x - e)) / (2.0 * step)
    return grad


def tiny_spec(group: str, seed: int, **dims) -> InstanceSpec:
    base = dict(n=2, l=3, m=3, p=2, q=1)
    base.update(dims)
    return InstanceSpec(group=group, seed=seed, **base)


def tiny_problem(group: str, seed: int, **dims) -> BilevelProblem:
    return generate(tiny_spec(group, seed, **dims))


def bounded_upper(problem: BilevelProblem, bound: float = 10.0) -> BilevelProblem:
    """Copy of an instance with box bounds on x, so objectives stay bounded."""
    upper = UpperSet(
        problem.upper.a1,
        problem.upper.b1,
        lb=-bound * np.ones(problem.n),
        ub=bound * np.ones(problem.n),
    )
    return BilevelProblem(
        n=problem.n,
        m=problem.m,
        upper_objective=problem.upper_objective,
        lower_objective=problem.lower_objective,
        lower=problem.lower,
        upper=upper,
        convex_lower=problem.convex_lower,
    )


def qualification_instance(seed: int, p: int = 1) -> BilevelProblem:
    """A small convex instance whose duality builds can satisfy the MFCQ.

    The lower level has a positive-definite quadratic objective and no box
    bounds on y: folded box rows come in pairs that provably block the
    componentwise-sign builds from ever satisfying the qualification, so the
    existence demonstration needs this unbounded-y shape (the hand-built demo
    problems have it too).
    """
    rng = np.random.default_rng(seed)
    n, m, q, l = 2, 3, 1, 3
    mat = rng.uniform(-1, 1, (m, m))
    hess = mat @ mat.T + 0.3 * np.eye(m)
    upper = UpperSet(
        rng.uniform(-1, 1, (l, n)),
        rng.uniform(0.2, 1.2, l),
        lb=-5 * np.ones(n),
        ub=5 * np.ones(n),
    )
    ineqs = [
        ScalarFunc(n, m, cx=rng.uniform(-1, 1, n), cy=rng.uniform(-1, 1, m),
                   c0=float(rng.uniform(-1, 1)))
        for _ in range(p)
    ]
    eqs = [
        ScalarFunc(n, m, cx=rng.uniform(-1, 1, n), cy=rng.uniform(-1, 1, m),
                   c0=float(rng.uniform(-1, 1)))
        for _ in range(q)
    ]
    return BilevelProblem(
        n=n,
        m=m,
        upper_objective=ScalarFunc(n, m, cx=rng.uniform(-1, 1, n), cy=rng.uniform(-1, 1, m)),
        lower_objective=ScalarFunc(n, m, qyy=hess, cy=rng.uniform(-1, 1, m)),
        lower=ConstraintBlock(ineqs, eqs),
        upper=upper,
    )


@pytest.fixture(scope="session")
def demo_cubic_constraint():
    return cubic_constraint_demo()


@pytest.fixture(scope="session")
def demo_cubic_objective():
    return cubic_objective_demo()
