"""Infeasibility measure, the t-schedule, and both run drivers."""

import numpy as np
import pytest

from bilevellab.algorithms import (
    AlgoConfig,
    CSV_HEADER,
    infeasibility,
    infeasibility_breakdown,
    relaxation_gap,
    run_direct,
    run_relaxation,
    t_schedule,
)
from bilevellab.model import BilevelProblem, ConstraintBlock, ScalarFunc, UpperSet
from bilevellab.reformulate import ReformulationError, ReformulationKind

from conftest import tiny_problem


class TestInfeasibility:
    def test_zero_at_feasible_point(self, demo_cubic_constraint):
        value = infeasibility(demo_cubic_constraint.problem, [8.0], [0.0, 8.0])
        assert value == pytest.approx(0.0, abs=1e-9)

    def test_value_gap_term(self, demo_cubic_constraint):
        # all constraints hold at (8, (1, 7)); only |f - V| = |-6 - (-8)| remains
        bd = infeasibility_breakdown(demo_cubic_constraint.problem, [8.0], [1.0, 7.0])
        assert bd.distance_to_upper == pytest.approx(0.0, abs=1e-9)
        assert bd.g_violation == pytest.approx(0.0, abs=1e-12)
        assert bd.h_violation == pytest.approx(0.0, abs=1e-12)
        assert bd.value_gap == pytest.approx(2.0, abs=1e-8)
        assert bd.total == pytest.approx(2.0, abs=1e-8)

    def test_distance_term(self, demo_cubic_constraint):
        # x = 0 sits one unit outside X = {x >= 1}; everything else vanishes
        value = infeasibility(demo_cubic_constraint.problem, [0.0], [0.0, 0.0])
        assert value == pytest.approx(1.0, abs=1e-7)

    def test_infinite_on_unsolvable_lower_level(self):
        n, m = 1, 1
        problem = BilevelProblem(
            n=n,
            m=m,
            upper_objective=ScalarFunc(n, m),
            lower_objective=ScalarFunc(n, m, cy=[1.0]),
            lower=ConstraintBlock([], [ScalarFunc(n, m, c0=1.0)]),
            upper=UpperSet([[1.0]], [1.0]),
        )
        bd = infeasibility_breakdown(problem, [0.0], [0.0])
        assert bd.total == np.inf
        assert bd.status == "lower_infeasible"


def test_t_schedule_reaches_floor_in_seven_values():
    ts = t_schedule(AlgoConfig(t0=1.0, sigma=0.1, eps_r=1e-6))
    np.testing.assert_allclose(ts, [1.0, 0.1, 0.01, 1e-3, 1e-4, 1e-5, 1e-6], rtol=1e-9)
    assert len(ts) == 7


def test_config_validation():
    with pytest.raises(ValueError):
        AlgoConfig(sigma=1.5)
    with pytest.raises(ValueError):
        AlgoConfig(eps_inf=-1.0)
    with pytest.raises(ValueError):
        AlgoConfig(x0_source="nope")


class TestRunDirect:
    def test_demo_from_optimal_start(self, demo_cubic_constraint):
        rec = run_direct(
            demo_cubic_constraint.problem,
            demo_cubic_constraint.kind,
            AlgoConfig(),
            instance="demo",
            x0=np.array([8.0]),
        )
        assert rec.accepted
        assert rec.objective == pytest.approx(0.0, abs=1e-6)
        assert rec.projected is False  # candidate already feasible: early stop
        assert rec.outer_iterations == 1

    def test_demo_from_projected_origin(self, demo_cubic_constraint):
        rec = run_direct(demo_cubic_constraint.problem, demo_cubic_constraint.kind, AlgoConfig())
        assert rec.accepted
        assert rec.objective == pytest.approx(0.0, abs=1e-6)

    def test_relaxed_kind_rejected(self, demo_cubic_constraint):
        with pytest.raises(ReformulationError):
            # the direct driver owns the unrelaxed problem; t lives elsewhere
            run_direct(
                demo_cubic_constraint.problem,
                "TWDP@0.5",  # type: ignore[arg-type]
                AlgoConfig(),
            )

    def test_csv_row_shape(self, demo_cubic_objective):
        rec = run_direct(demo_cubic_objective.problem, demo_cubic_objective.kind, AlgoConfig(), instance="d2")
        row = rec.to_csv_row()
        assert len(row.split(",")) == len(CSV_HEADER.split(","))
        assert row.startswith("d2,TMDP,direct,")


class TestRunRelaxation:
    def test_demo_reaches_global_value(self, demo_cubic_objective):
        rec = run_relaxation(demo_cubic_objective.problem, demo_cubic_objective.kind, AlgoConfig())
        assert rec.accepted
        assert rec.objective == pytest.approx(0.0, abs=1e-6)

    def test_outer_iterations_bounded_by_schedule(self, demo_cubic_constraint):
        cfg = AlgoConfig()
        rec = run_relaxation(demo_cubic_constraint.problem, demo_cubic_constraint.kind, cfg)
        assert rec.accepted
        assert rec.outer_iterations <= len(t_schedule(cfg))

    def test_gap_definitions(self, demo_cubic_constraint):
        problem = demo_cubic_constraint.problem
        x, y = np.array([8.0]), np.array([0.0, 8.0])
        z, u, v = np.array([0.0, 8.0]), np.array([0.0, 2.0]), np.array([1.0])
        # at the lifted optimum every gap closes
        for kind in ReformulationKind:
            assert relaxation_gap(problem, kind, x, y, z, u, v) == pytest.approx(0.0, abs=1e-9)
        # perturbing z opens the objective-difference gaps
        z2 = z + np.array([0.5, -0.5])
        assert relaxation_gap(problem, ReformulationKind.TMDP, x, y, z2, u, v) > 0.1


@pytest.mark.parametrize("algo", ["direct", "relaxation"])
def test_outputs_are_bilevel_feasible(algo):
    """The projection epilogue's contract on random instances."""
    runner = run_direct if algo == "direct" else run_relaxation
    for seed in range(5):
        problem = tiny_problem("II", seed=seed + 60)
        rec = runner(problem, ReformulationKind.TWDP, AlgoConfig(seed=seed), instance=f"s{seed}")
        if rec.status == "failed":
            continue
        recheck = infeasibility(problem, rec.x, rec.y)
        assert recheck <= rec.tolerance + 1e-12
        assert rec.infeasibility <= rec.tolerance


def test_determinism_to_the_last_bit():
    problem = tiny_problem("II", seed=77)
    cfg = AlgoConfig(seed=77)
    a = run_relaxation(problem, ReformulationKind.TMDP, cfg)
    b = run_relaxation(problem, ReformulationKind.TMDP, cfg)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.u, b.u)
    assert a.objective == b.objective
    assert a.infeasibility == b.infeasibility
