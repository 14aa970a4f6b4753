"""Verification instruments: duality, MFCQ, multiplier maps, oracle, embeddings."""

import numpy as np
import pytest

from bilevellab.algorithms import AlgoConfig, run_direct
from bilevellab.analysis import (
    AnalysisError,
    MAP_TARGETS,
    brute_force_bilevel,
    check_embeddings,
    check_mfcq,
    check_weak_duality,
    map_kkt,
    nlp_kkt_residual,
    sample_lifted_points,
    strong_stationarity,
    validate_mfcq_direction,
)
from bilevellab.model import BilevelProblem, ConstraintBlock, ScalarFunc, UpperSet
from bilevellab.nlp import project_upper, solve_convex_lower, solve_nlp
from bilevellab.reformulate import DualKind, ReformulationKind, build

from conftest import bounded_upper, tiny_problem


class TestDuality:
    def test_demo_strong_duality_at_fixed_x(self, demo_cubic_constraint):
        rep = check_weak_duality(demo_cubic_constraint.problem, [8.0], DualKind.TWD)
        assert rep.status == "ok"
        assert rep.primal == pytest.approx(-8.0, abs=1e-8)
        assert rep.dual_best == pytest.approx(-8.0, abs=1e-6)
        assert rep.weak_ok and rep.strong_ok

    def test_unconstrained_strictly_convex(self):
        n, m = 1, 2
        problem = BilevelProblem(
            n=n,
            m=m,
            upper_objective=ScalarFunc(n, m),
            lower_objective=ScalarFunc(n, m, qyy=2.0 * np.eye(m), cy=[1.0, -2.0]),
            lower=ConstraintBlock(),
            upper=UpperSet([[1.0]], [1.0]),
        )
        # unconstrained minimum of y'y + (1,-2)'y
        expected = -0.5 * (1.0**2 + 2.0**2) / 2.0
        for kind in DualKind:
            rep = check_weak_duality(problem, [0.0], kind)
            assert rep.primal == pytest.approx(expected, abs=1e-8)
            assert rep.strong_ok

    @pytest.mark.parametrize("kind", list(DualKind))
    def test_random_convex_instances(self, kind):
        problem = tiny_problem("II", seed=51)
        rng = np.random.default_rng(5)
        for trial in range(2):
            x = project_upper(problem.upper, rng.uniform(-3, 3, problem.n))
            rep = check_weak_duality(problem, x, kind, seed=trial)
            assert rep.status == "ok"
            assert rep.weak_ok
            assert rep.strong_ok


class TestMfcq:
    def test_demo_certificates(self, demo_cubic_constraint, demo_cubic_objective):
        for demo in (demo_cubic_constraint, demo_cubic_objective):
            nlp = build(demo.problem, demo.kind)
            rep = check_mfcq(nlp, demo.reference_point)
            assert rep.holds
            assert rep.s_star > 1e-9
            ok, eq_slope, act_slope, _ = validate_mfcq_direction(
                nlp, demo.reference_point, demo.mfcq_direction
            )
            assert ok
            assert eq_slope <= 1e-9
            assert act_slope < 0

    def test_demo_active_rows(self, demo_cubic_constraint):
        nlp = build(demo_cubic_constraint.problem, demo_cubic_constraint.kind)
        rep = check_mfcq(nlp, demo_cubic_constraint.reference_point)
        assert rep.n_equalities == 4
        assert sorted(rep.active_rows) == ["g_y[1]", "gap", "u_nonneg[0]"]

    def test_mpcc_fails_at_lifted_points(self):
        for seed in (70, 71, 72):
            problem = tiny_problem("I", seed=seed)
            x0 = project_upper(problem.upper, np.zeros(problem.n))
            lower = solve_convex_lower(problem, x0)
            if not lower.ok:
                continue
            w = np.concatenate([x0, lower.y, lower.u, lower.v])
            mpcc = build(problem, ReformulationKind.MPCC)
            assert mpcc.max_violation(w) <= 1e-7
            rep = check_mfcq(mpcc, w)
            assert not rep.holds
            assert rep.s_star <= 1e-9 or not rep.eq_rank_ok

    def test_infeasible_point_rejected(self, demo_cubic_constraint):
        nlp = build(demo_cubic_constraint.problem, demo_cubic_constraint.kind)
        with pytest.raises(AnalysisError):
            check_mfcq(nlp, np.zeros(nlp.dim))


def _kkt_point(problem, kind, tol=1e-8):
    """A KKT point of the reformulation found from the lifted start, or None."""
    x0 = project_upper(problem.upper, np.zeros(problem.n))
    lower = solve_convex_lower(problem, x0)
    if not lower.ok:
        return None
    parts = [x0, lower.y] + ([] if kind is ReformulationKind.MPCC else [lower.y])
    start = np.concatenate(parts + [lower.u, lower.v])
    nlp = build(problem, kind)
    sol = solve_nlp(nlp, start, tol=tol)
    if sol.status != "kkt_ok":
        return None
    return nlp, sol


class TestMultiplierMaps:
    def test_zero_multipliers_map_to_zero(self):
        problem = tiny_problem("I", seed=80)
        nlp = build(problem, ReformulationKind.WDP)
        rng = np.random.default_rng(0)
        w = rng.normal(size=nlp.dim)
        zeros = np.zeros(nlp.n_rows)
        res = nlp_kkt_residual(nlp, w, zeros)
        _, grad = nlp.eval_objective(w)
        assert res.stationarity == pytest.approx(np.linalg.norm(grad, np.inf))

    def test_wdp_kkt_transports_to_feasible_targets(self):
        transported = 0
        for seed in range(82, 94):
            problem = tiny_problem("I", seed=seed)
            found = _kkt_point(problem, ReformulationKind.WDP)
            if found is None:
                continue
            nlp, sol = found
            for target in MAP_TARGETS[ReformulationKind.WDP]:
                tgt_nlp = build(problem, target)
                if tgt_nlp.max_violation(sol.point) > 1e-7:
                    continue
                mapping = map_kkt(problem, sol.point, ReformulationKind.WDP,
                                  sol.multipliers, target)
                assert mapping.target_residual.total <= 1e-6
                transported += 1
        assert transported >= 3  # maps must actually fire across the seeds

    def test_composition_consistency(self):
        """WDP -> MDP -> eMDP agrees with the direct WDP -> eMDP map."""
        for seed in range(82, 94):
            problem = tiny_problem("I", seed=seed)
            found = _kkt_point(problem, ReformulationKind.WDP)
            if found is None:
                continue
            _, sol = found
            emdp = build(problem, ReformulationKind.eMDP)
            mdp = build(problem, ReformulationKind.MDP)
            if emdp.max_violation(sol.point) > 1e-7 or mdp.max_violation(sol.point) > 1e-7:
                continue
            direct = map_kkt(problem, sol.point, ReformulationKind.WDP,
                             sol.multipliers, ReformulationKind.eMDP)
            via = map_kkt(problem, sol.point, ReformulationKind.MDP,
                          map_kkt(problem, sol.point, ReformulationKind.WDP,
                                  sol.multipliers, ReformulationKind.MDP).target_mults,
                          ReformulationKind.eMDP)
            np.testing.assert_allclose(direct.target_mults, via.target_mults, atol=1e-10)
            return
        pytest.skip("no instance produced a transportable point")

    def test_lifted_kkt_point_is_strongly_stationary(self):
        checked = 0
        for seed in range(82, 96):
            problem = tiny_problem("I", seed=seed)
            for kind in MAP_TARGETS:
                found = _kkt_point(problem, kind)
                if found is None:
                    continue
                nlp, sol = found
                x, y, z, u, v = nlp.layout.split(sol.point)
                # a genuine lift: z equals y at working precision, so the
                # multiplier transport is exact rather than amplified
                if z is None or np.linalg.norm(z - y, np.inf) > 1e-8 * (1 + np.linalg.norm(y)):
                    continue
                mapping = map_kkt(problem, sol.point, kind, sol.multipliers,
                                  ReformulationKind.MPCC)
                report = mapping.stationarity_report
                assert report is not None
                assert report.strong
                assert report.sign_violation <= 1e-6
                checked += 1
        assert checked >= 2

    def test_target_infeasible_rejected(self, demo_cubic_constraint):
        problem = demo_cubic_constraint.problem
        nlp = build(problem, ReformulationKind.WDP)
        rng = np.random.default_rng(1)
        w = rng.normal(size=nlp.dim)
        with pytest.raises(AnalysisError):
            map_kkt(problem, w, ReformulationKind.WDP, np.zeros(nlp.n_rows),
                    ReformulationKind.MDP)


class TestStrongStationarity:
    def test_index_sets_partition(self):
        problem = tiny_problem("I", seed=90)
        x0 = project_upper(problem.upper, np.zeros(problem.n))
        lower = solve_convex_lower(problem, x0)
        w = np.concatenate([x0, lower.y, lower.u, lower.v])
        report = strong_stationarity(
            problem, w,
            np.zeros(problem.p), np.zeros(problem.q),
            np.zeros(problem.p), np.zeros(problem.m),
        )
        sets = np.concatenate([report.i_active_positive, report.i_inactive_zero, report.i_biactive])
        assert sorted(sets.tolist()) == list(range(problem.p))


class TestOracle:
    def test_hand_built_bilevel(self):
        # min x + y over x in [0, 1], y solving max y s.t. y <= x
        n, m = 1, 1
        problem = BilevelProblem(
            n=n,
            m=m,
            upper_objective=ScalarFunc(n, m, cx=[1.0], cy=[1.0]),
            lower_objective=ScalarFunc(n, m, cy=[-1.0]),
            lower=ConstraintBlock([ScalarFunc(n, m, cx=[-1.0], cy=[1.0])], []),
            upper=UpperSet([[1.0], [-1.0]], [1.0, 0.0]),
        )
        res = brute_force_bilevel(problem)
        assert res.status == "optimal"
        np.testing.assert_allclose(res.x, [0.0], atol=1e-9)
        np.testing.assert_allclose(res.y, [0.0], atol=1e-9)
        assert res.value == pytest.approx(0.0, abs=1e-9)

    def test_unsatisfiable_lower_level_reports_infeasible(self):
        n, m = 1, 1
        problem = BilevelProblem(
            n=n,
            m=m,
            upper_objective=ScalarFunc(n, m, cx=[1.0]),
            lower_objective=ScalarFunc(n, m, cy=[1.0]),
            lower=ConstraintBlock(
                [ScalarFunc(n, m, cy=[1.0], c0=-1.0)],  # y <= 1
                [ScalarFunc(n, m, c0=1.0)],  # 0 = 1
            ),
            upper=UpperSet([[1.0]], [1.0]),
        )
        res = brute_force_bilevel(problem)
        assert res.status == "infeasible"

    def test_pattern_budget_guard(self):
        problem = tiny_problem("I", seed=91, m=6, p=4)  # 4 + 12 inequalities
        with pytest.raises(AnalysisError):
            brute_force_bilevel(problem)

    def test_oracle_matches_best_run_on_small_seeds(self):
        matched = 0
        for seed in (101, 102, 103):
            problem = bounded_upper(tiny_problem("I", seed=seed))
            oracle = brute_force_bilevel(problem)
            assert oracle.status == "optimal"
            best = np.inf
            for kind in (ReformulationKind.MPCC, ReformulationKind.TWDP):
                rec = run_direct(problem, kind, AlgoConfig(seed=seed))
                if rec.accepted:
                    best = min(best, rec.objective)
            assert best >= oracle.value - 1e-6  # oracle dominance
            if abs(best - oracle.value) <= 1e-5:
                matched += 1
        assert matched >= 2


class TestEmbeddings:
    def test_lifted_samples_satisfy_all_inclusions(self):
        for seed in (110, 111):
            problem = tiny_problem("II", seed=seed)
            points = sample_lifted_points(problem, 10, seed=seed)
            assert points
            checked, violations = check_embeddings(problem, points, tol=1e-9)
            assert checked > 0
            assert violations == []
