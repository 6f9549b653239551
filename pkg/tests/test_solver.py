import math

import numpy as np
import pytest

from auditsample.solver import (AuditPlan, BoundaryError, Objective, SolverConfig, SolverError,
                                allocate_start, gradient, normalize_deltas, objective, optimize,
                                polish_integer_plan, round_to_integer_plan, solve_single, with_bounds)
from auditsample.table import ContingencyTable3, deviance
from oracles import adjusted_counts, brute_force_best, central_difference, ipf_deviance, random_table


def interior_point(rng, table):
    n = table.counts
    dp = rng.uniform(0.05, 0.45, size=n.shape[:2]) * n[:, :, 0]
    dm = rng.uniform(0.05, 0.45, size=n.shape[:2]) * n[:, :, 1]
    return dp, dm


def numeric_gradient(table, dp, dm, kind):
    def f_plus(v):
        return objective(table.adjusted(v, dm), kind)

    def f_minus(v):
        return objective(table.adjusted(dp, v), kind)

    return np.stack([central_difference(f_plus, dp), central_difference(f_minus, dm)])


# objective values


def test_zero_adjustment_gives_base_deviance_for_all_objectives():
    t = ContingencyTable3(np.array([[[40, 3], [20, 9]], [[10, 12], [30, 2]]]))
    a = t.adjusted(0, 0)
    d = deviance(t)
    for kind in (Objective.deviance(), Objective.f1(0.5), Objective.f2(3.0)):
        assert objective(a, kind) == d


def test_f2_arithmetic_example():
    # D = 117.27, kappa = 14.7, total adjustment 1200
    kind = Objective.f2(14.7)
    expected = 117.27 + math.exp(-117.27 / 14.7) * 1200
    assert kind.value(117.27, 1200.0) == pytest.approx(expected, rel=1e-15)
    assert kind.value(117.27, 1200.0) == pytest.approx(117.68, abs=0.01)


def test_f2_is_close_to_deviance_when_deviance_is_large():
    kind = Objective.f2(2.0)
    for d in (20.0, 55.0, 400.0):
        assert abs(kind.value(d, 500.0) - d) <= 500.0 * math.exp(-10)


def test_f1_adds_linear_penalty():
    assert Objective.f1(0.01).value(10.0, 300.0) == pytest.approx(13.0)


# gradients


@pytest.mark.parametrize("kind", [Objective.deviance(), Objective.f1(0.3), Objective.f2(5.0)])
def test_gradient_matches_central_differences(kind):
    rng = np.random.default_rng(11)
    t = ContingencyTable3(random_table(rng, 3, 3, high=80, min_count=5))
    for _ in range(5):
        dp, dm = interior_point(rng, t)
        g = gradient(t.adjusted(dp, dm), kind)
        fd = numeric_gradient(t, dp, dm, kind)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_plus_and_minus_derivatives_cancel():
    rng = np.random.default_rng(3)
    t = ContingencyTable3(random_table(rng, 4, 2, high=50, min_count=3))
    dp, dm = interior_point(rng, t)
    g = gradient(t.adjusted(dp, dm))
    np.testing.assert_allclose(g[0] + g[1], 0.0, atol=1e-14)


def test_gradient_vanishes_in_a_proportional_stratum():
    n = np.array([[[20, 10], [7, 3]], [[40, 20], [9, 9]]])
    g = gradient(ContingencyTable3(n).adjusted(0, 0))
    np.testing.assert_allclose(g[:, :, 0], 0.0, atol=1e-14)
    assert np.all(g[:, :, 1] != 0)


def test_gradient_on_the_boundary_raises():
    t = ContingencyTable3(np.array([[[5, 2]], [[3, 3]]]))
    with pytest.raises(BoundaryError):
        gradient(t.adjusted([[0], [0]], [[2], [0]]))


# normalization and rounding


def test_normalize_examples():
    assert tuple(map(int, normalize_deltas(5, 3))) == (2, 0)
    assert tuple(map(int, normalize_deltas(0, 4))) == (0, 4)


def test_normalization_keeps_deviance():
    rng = np.random.default_rng(5)
    t = ContingencyTable3(random_table(rng, 3, 2, high=40, min_count=10))
    dp, dm = interior_point(rng, t)
    a, b = normalize_deltas(dp, dm)
    assert deviance(t.adjusted(a, b)) == pytest.approx(deviance(t.adjusted(dp, dm)), rel=1e-12)
    assert np.all(np.minimum(a, b) == 0)


def test_rounding_keeps_integer_input():
    t = ContingencyTable3(np.array([[[9, 1], [4, 6]], [[5, 5], [8, 2]]]))
    cfg = SolverConfig(m_plus=5, m_minus=5)
    dp = np.array([[2, 0], [0, 1]])
    dm = np.array([[0, 3], [1, 0]])
    a, b = round_to_integer_plan(dp, dm, t, cfg)
    np.testing.assert_array_equal(a, dp)
    np.testing.assert_array_equal(b, dm)


def test_rounding_picks_the_cell_with_larger_reduction():
    # both strata want more audited units, the second one more urgently
    n = np.array([[[10, 5], [10, 5]], [[30, 1], [30, 0]]])
    t = ContingencyTable3(n)
    cfg = SolverConfig(m_plus=1, m_minus=0)
    dp = np.array([[0, 0], [0.6, 0.6]])
    a, _ = round_to_integer_plan(dp, 0, t, cfg)
    assert a.sum() == 1
    candidates = {}
    for cell in ((1, 0), (1, 1)):
        trial = np.zeros((2, 2), dtype=int)
        trial[cell] = 1
        candidates[cell] = ipf_deviance(adjusted_counts(n, trial, 0))
    best = min(candidates, key=candidates.get)
    assert a[best] == 1


def test_rounding_tie_goes_to_lowest_stratum():
    n = np.array([[[20, 1], [20, 1]], [[20, 9], [20, 9]]])
    t = ContingencyTable3(n)
    cfg = SolverConfig(m_plus=1, m_minus=0)
    a, _ = round_to_integer_plan(np.array([[0.6, 0.6], [0, 0]]), 0, t, cfg)
    assert a[0, 0] == 1 and a[0, 1] == 0


def test_polish_never_worsens():
    rng = np.random.default_rng(9)
    for _ in range(5):
        t = ContingencyTable3(random_table(rng, 3, 3, high=30, min_count=1))
        cfg = SolverConfig(m_plus=6, m_minus=6)
        dp = np.zeros((3, 3), dtype=int)
        dp[0, 0] = min(2, t.counts[0, 0, 0])
        a, b = polish_integer_plan(dp, 0, t, cfg)
        assert a.sum() <= 6 and b.sum() <= 6
        assert deviance(t.adjusted(a, b)) <= deviance(t.adjusted(dp, 0)) + 1e-12


# starting values


def test_allocate_start_respects_bounds_and_sum():
    rng = np.random.default_rng(0)
    upper = np.array([1.0, 50.0, 2.0, 100.0, 0.5])
    x = allocate_start(rng, upper, 60.0)
    assert x.sum() == pytest.approx(60.0)
    assert np.all(x > 0) and np.all(x < upper)


# single local solve


def test_solve_single_descends_monotonically():
    rng = np.random.default_rng(1)
    t = ContingencyTable3(random_table(rng, 3, 3, high=60, min_count=2))
    cfg = SolverConfig(m_plus=30, m_minus=10)
    dp = np.full((3, 3), 1.0)
    dm = np.full((3, 3), 0.5)
    trace = []
    out = solve_single(t.adjusted(dp, dm), cfg, trace=trace)
    assert len(trace) > 1
    assert all(b <= a + 1e-12 * max(1, abs(a)) for a, b in zip(trace, trace[1:]))
    assert deviance(out) < deviance(t.adjusted(dp, dm))


def test_solve_single_from_an_independent_table_stays_at_zero():
    t = ContingencyTable3(np.array([[[20, 10], [8, 8]], [[40, 20], [4, 4]]]))
    cfg = SolverConfig(m_plus=5, m_minus=5)
    out = solve_single(t.adjusted(0.5, 0.5), cfg)
    assert deviance(out) == pytest.approx(0.0, abs=1e-6)


def test_solve_single_reaches_the_continuous_grid_optimum():
    n = np.array([[[12, 2], [9, 6]], [[7, 8], [15, 1]]])
    t = ContingencyTable3(n)
    cfg = SolverConfig(m_plus=4, m_minus=0)
    grid = np.arange(0, 4.0001, 0.25)
    best_grid = math.inf
    for a in grid:
        for b in grid:
            for c in grid:
                for d in grid:
                    dp = np.array([[a, b], [c, d]])
                    if dp.sum() <= 4 and np.all(dp <= n[:, :, 0]):
                        best_grid = min(best_grid, deviance(t.adjusted(dp, 0)))
    rng = np.random.default_rng(0)
    found = math.inf
    for _ in range(10):
        w = rng.uniform(0.05, 1, size=(2, 2))
        start = t.adjusted(w / w.sum() * rng.uniform(0.5, 3.5), 0)
        found = min(found, deviance(solve_single(start, cfg)))
    assert found <= best_grid + 1e-6


# multi-start driver


def test_independent_table_gives_empty_accepted_plan():
    t = ContingencyTable3(np.array([[[20, 10], [8, 8]], [[40, 20], [4, 4]]]))
    plan = optimize(t, SolverConfig(m_plus=5, m_minus=5, n_attempts=5))
    assert isinstance(plan, AuditPlan)
    assert plan.accepted
    assert plan.delta_plus.sum() == 0 and plan.delta_minus.sum() == 0


def test_zero_attempts_returns_the_unchanged_sample():
    rng = np.random.default_rng(2)
    t = ContingencyTable3(random_table(rng, 3, 2, high=40, min_count=1))
    plan = optimize(t, SolverConfig(m_plus=5, m_minus=5, n_attempts=0))
    assert plan.best_attempt_index == -1
    assert plan.achieved_deviance == plan.deviance_before


def test_plan_respects_caps_and_stratum_sizes():
    rng = np.random.default_rng(6)
    for _ in range(5):
        t = ContingencyTable3(random_table(rng, 3, 3, high=50, min_count=0) + np.array([0, 1]))
        plan = optimize(t, SolverConfig(m_plus=20, m_minus=8, n_attempts=5, master_seed=1))
        assert plan.delta_plus.sum() <= 20 and plan.delta_minus.sum() <= 8
        assert np.all(plan.delta_plus <= t.counts[:, :, 0])
        assert np.all(plan.delta_minus <= t.counts[:, :, 1])
        assert np.all(np.minimum(plan.delta_plus, plan.delta_minus) == 0)
        assert plan.achieved_deviance <= plan.deviance_before + 1e-12
        assert plan.achieved_deviance == pytest.approx(deviance(plan.final_counts), rel=1e-12, abs=1e-12)


def test_same_seed_same_plan_and_more_attempts_never_hurt():
    rng = np.random.default_rng(7)
    t = ContingencyTable3(random_table(rng, 4, 3, high=60, min_count=1))
    cfg = SolverConfig(m_plus=25, m_minus=10, n_attempts=6, master_seed=123, polish=False)
    p1, p2 = optimize(t, cfg), optimize(t, cfg)
    np.testing.assert_array_equal(p1.delta_plus, p2.delta_plus)
    np.testing.assert_array_equal(p1.delta_minus, p2.delta_minus)
    # attempts are seeded individually, so a longer run contains the shorter one
    p3 = optimize(t, SolverConfig(m_plus=25, m_minus=10, n_attempts=12, master_seed=123, polish=False))
    assert p3.objective_value <= p1.objective_value


def test_small_problems_match_enumeration():
    rng = np.random.default_rng(21)
    for _ in range(5):
        n = random_table(rng, 2, 2, high=15, min_count=1)
        t = ContingencyTable3(n)
        plan = optimize(t, SolverConfig(m_plus=3, m_minus=2, n_attempts=10, master_seed=4))
        best = brute_force_best(n, 3, 2)
        assert plan.achieved_deviance <= best * 1.05 + 1e-9


def test_integer_starts_escape_a_poor_rounding():
    # rounding the continuous optimum lands in a basin 33% above the integer optimum
    n = np.array([[[20, 10], [17, 4]], [[15, 13], [0, 2]]])
    t = ContingencyTable3(n)
    best = brute_force_best(n, 1, 4)
    plan = optimize(t, SolverConfig(m_plus=1, m_minus=4, n_attempts=20, master_seed=0))
    assert plan.achieved_deviance == pytest.approx(best, rel=1e-9)


def test_penalized_plan_moves_no_more_units():
    n = np.array([[[100, 10], [100, 30]], [[100, 12], [100, 28]]])
    t = ContingencyTable3(n)
    d_plan = optimize(t, SolverConfig(m_plus=40, m_minus=40, n_attempts=5))
    f_plan = optimize(t, SolverConfig(m_plus=40, m_minus=40, n_attempts=5, objective=Objective.f1(1.0)))
    moved = lambda p: p.delta_plus.sum() + p.delta_minus.sum()  # noqa: E731
    assert moved(f_plan) <= moved(d_plan)


def test_f2_default_kappa_is_a_tenth_of_the_cutoff():
    n = np.array([[[50, 5], [40, 15]], [[45, 10], [60, 2]]])
    plan = optimize(ContingencyTable3(n), SolverConfig(m_plus=5, m_minus=5, n_attempts=2,
                                                       objective=Objective.f2()))
    assert plan.objective.weight == pytest.approx(plan.cutoff / 10)


def test_cutoff_and_acceptance():
    n = np.array([[[50, 5], [40, 15]], [[45, 10], [60, 2]]])
    plan = optimize(ContingencyTable3(n), SolverConfig(m_plus=0, m_minus=0, n_attempts=1))
    assert plan.cutoff == pytest.approx(5.991464547, rel=1e-8)
    assert plan.accepted == (plan.achieved_deviance <= plan.cutoff)


def test_caps_larger_than_available_are_rejected():
    t = ContingencyTable3(np.array([[[5, 2]], [[3, 3]]]))
    with pytest.raises(ValueError, match="m_plus"):
        optimize(t, SolverConfig(m_plus=9, m_minus=0))
    with pytest.raises(ValueError, match="m_minus"):
        optimize(t, SolverConfig(m_plus=0, m_minus=6))


@pytest.mark.parametrize("kwargs", [dict(m_plus=-1, m_minus=0), dict(m_plus=1, m_minus=0, alpha=1.0),
                                    dict(m_plus=1, m_minus=0, start_bounds=(0.5, 0.4, 0.1, 0.9)),
                                    dict(m_plus=1, m_minus=0, n_attempts=-2)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_with_bounds_replaces_caps_only():
    cfg = SolverConfig(m_plus=1, m_minus=2, n_attempts=7)
    new = with_bounds(cfg, 10, 20)
    assert (new.m_plus, new.m_minus, new.n_attempts) == (10, 20, 7)


def test_solver_error_type_is_exported():
    assert issubclass(SolverError, RuntimeError)
