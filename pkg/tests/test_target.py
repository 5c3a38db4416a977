import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from branch_target import hjb
from branch_target.labels import ROOT, Label
from branch_target.model import OffspringLaw, TargetSpec, fintech_scenario, tabulated_model
from branch_target.population import PointMeasure
from branch_target.simulate import ConstantControl, PopulationPath, riskless
from branch_target.target import (BracketError, Problem, branching_consistency, dpp_residual, estimate_value,
                                  pathwise_monotonicity, success_probability, terminal_success)

NO_BRANCH = OffspringLaw(0.0, ((1, 1.0),))
FORK = OffspringLaw(0.5, ((2, 1.0),))


def L(*d):
    return Label(d)


def path_with(entries, dim=2):
    mu = PointMeasure.from_entries(entries, dim=dim) if entries else PointMeasure.empty(dim)
    return PopulationPath(0, 0.0, 1.0, [], np.array([1.0]), [mu], mu, len(mu))


def affine_target(slope=1.0, intercept=0.0, T=1.0):
    return TargetSpec(T, lambda labels, x: slope * x[:, 0] + intercept)


def deterministic_problem(lam=0.3, lam_y=-0.1, target=None):
    model = tabulated_model([0.0], [lam], [0.0], [lam_y], [0.0])
    return Problem(model, NO_BRANCH, target or affine_target())


# ---------------------------------------------------------------- terminal_success


def test_empty_population_succeeds():
    v = terminal_success(path_with([]), affine_target())
    assert v.success and v.margin == math.inf and v.violated_labels == []


def test_boundary_particle_succeeds():
    v = terminal_success(path_with([(ROOT, [0.5, 0.5])]), affine_target())
    assert v.success and v.margin == 0.0


def test_violation_reported():
    v = terminal_success(path_with([(L(0), [0.0, 0.0]), (L(1), [0.3, 0.0])]), affine_target())
    assert not v.success
    assert v.margin == pytest.approx(-0.3)
    assert v.violated_labels == [L(1)]


@given(st.lists(st.floats(-2, 2), max_size=6))
def test_verdict_invariant(margins):
    entries = [(L(k), [0.0, m]) for k, m in enumerate(margins)]
    v = terminal_success(path_with(entries), affine_target())
    assert v.success == (not margins or min(margins) >= 0)
    assert v.success == (v.margin >= 0)


# ---------------------------------------------------------------- success_probability


def test_success_probability_trivial_cases():
    model = tabulated_model([0.0, 1.0], [0.0, 0.0], [0.3, 0.3], [0.0, 0.0], [0.0, 0.0])
    mu = PointMeasure.single(ROOT, [0.0])
    y = 0.4
    slack = Problem(model, FORK, TargetSpec(1.0, lambda labels, x: np.full(len(labels), y - 1)))
    tight = Problem(model, FORK, TargetSpec(1.0, lambda labels, x: np.full(len(labels), y + 1)))
    assert success_probability(slack, 0.0, mu, y, riskless(), 200, seed=1) == (1.0, 0.0)
    assert success_probability(tight, 0.0, mu, y, riskless(), 200, seed=1) == (0.0, 0.0)


def test_riskless_upper_bound_always_succeeds(desk):
    prob = Problem(desk.model, FORK, desk.target)
    mu = PointMeasure.single(ROOT, [0.0])
    rate, _ = success_probability(prob, 0.2, mu, desk.upper_bound(0.2), riskless(), 2000, seed=3)
    assert rate == 1.0


def test_success_probability_deterministic_in_seed(desk):
    prob = Problem(desk.model, FORK, desk.target)
    mu = PointMeasure.single(ROOT, [0.0])
    a = success_probability(prob, 0.0, mu, -0.5, ConstantControl(0.5), 500, seed=9)
    assert a == success_probability(prob, 0.0, mu, -0.5, ConstantControl(0.5), 500, seed=9)


# ---------------------------------------------------------------- estimate_value


def test_estimate_riskless_flat_payoff():
    sc = fintech_scenario(0.1, 0.2, 0.02, 0.1, strike0=0.0)  # g_i = log(kappa) for all i
    prob = Problem(sc.model, FORK, sc.target)
    mu = PointMeasure.single(ROOT, [0.0])
    est = estimate_value(prob, 0.25, mu, [riskless()], (-4.0, 1.0), n_paths=200, seed=1, tol=0.01)
    assert est.y_hat == pytest.approx(-0.02 * 0.75 + math.log(0.1), abs=0.01)
    assert est.failure_rate_at_y_hat <= 0.01
    assert est.control_id == "riskless"


def test_estimate_deterministic_ode():
    prob = deterministic_problem()
    mu = PointMeasure.single(ROOT, [0.2])
    est = estimate_value(prob, 0.0, mu, [riskless()], (-2.0, 2.0), n_paths=5, seed=0, tol=1e-3)
    # y + lam_y T >= x0 + lam T
    assert est.y_hat == pytest.approx(0.2 + 0.3 + 0.1, abs=1e-3)


def test_bracket_errors():
    prob = deterministic_problem()
    mu = PointMeasure.single(ROOT, [0.2])
    with pytest.raises(BracketError):
        estimate_value(prob, 0.0, mu, [riskless()], (1.0, 2.0), n_paths=5, seed=0)
    with pytest.raises(BracketError):
        estimate_value(prob, 0.0, mu, [riskless()], (-2.0, 0.0), n_paths=5, seed=0)
    with pytest.raises(BracketError):
        estimate_value(prob, 0.0, mu, [riskless()], (1.0, -1.0), n_paths=5, seed=0)


def test_bisection_trace_straddles(desk):
    prob = Problem(desk.model, FORK, desk.target)
    mu = PointMeasure.single(ROOT, [0.0])
    est = estimate_value(prob, 0.0, mu, [riskless(), ConstantControl(0.5)], (-2.6, 0.2), n_paths=400, seed=2)
    rows = [r for r in est.trace if r[1] == est.control_id]
    ok = [y for y, _, rate, _ in rows if rate <= 0.01]
    bad = [y for y, _, rate, _ in rows if rate > 0.01]
    assert max(bad) < min(ok)
    assert max(bad) <= est.y_hat <= min(ok)
    assert min(ok) - max(bad) <= est.bisection_tol


def test_estimate_independent_of_bracket(desk):
    prob = Problem(desk.model, FORK, desk.target)
    mu = PointMeasure.single(ROOT, [0.0])
    a = estimate_value(prob, 0.0, mu, [riskless()], (-2.6, 0.2), n_paths=400, seed=2, tol=0.02)
    b = estimate_value(prob, 0.0, mu, [riskless()], (-3.3, 0.9), n_paths=400, seed=2, tol=0.02)
    assert abs(a.y_hat - b.y_hat) <= 2 * 0.02


# ---------------------------------------------------------------- branching property


def test_branching_identical_particles():
    prob = deterministic_problem()
    mu = PointMeasure.from_entries([(L(0), [0.2]), (L(1), [0.2])])
    res = branching_consistency(prob, 0.0, mu, [riskless()], (-2.0, 2.0), n_paths=5, seed=0, tol=0.01)
    assert res.gap <= 2 * 0.01


def test_branching_vacuous_particle():
    target = TargetSpec.per_label(1.0, lambda lab, x: np.full(len(x), -np.inf) if lab == L(1) else x[:, 0])
    prob = deterministic_problem(target=target)
    mu = PointMeasure.from_entries([(L(0), [0.2]), (L(1), [5.0])])
    res = branching_consistency(prob, 0.0, mu, [riskless()], (-2.0, 2.0), n_paths=5, seed=0, tol=0.01)
    assert res.singles[1] is None
    assert res.lhs.y_hat == pytest.approx(res.singles[0].y_hat, abs=0.01)


def test_branching_fintech_two_particles(desk):
    prob = Problem(desk.model, FORK, desk.target)
    mu = PointMeasure.from_entries([(L(0), [0.0]), (L(1), [math.log(0.5)])])
    family = [riskless(), ConstantControl(0.5)]
    gaps = []
    for n in (250, 2000):
        res = branching_consistency(prob, 0.0, mu, family, (-2.6, 0.2), n_paths=n, seed=4, tol=0.05)
        assert res.lhs.y_hat >= res.rhs - 0.05
        assert res.gap <= 2 * (0.05 + res.lhs.ci_halfwidth) + 0.05
        gaps.append(res.gap)
    assert gaps[1] <= gaps[0] + 0.05


def test_branching_needs_two_particles():
    with pytest.raises(ValueError):
        branching_consistency(deterministic_problem(), 0.0, PointMeasure.single(ROOT, [0.0]), [riskless()],
                              (-1, 1))


# ---------------------------------------------------------------- monotonicity and DPP


def test_pathwise_monotonicity_zero_violations(desk):
    prob = Problem(desk.model, FORK, desk.target)
    mu = PointMeasure.single(ROOT, [0.0])
    v, n = pathwise_monotonicity(prob, 0.0, mu, 0.0, 0.1, ConstantControl(0.7), 200, seed=5)
    assert v == 0 and n > 200 * 101


def _surface(model, law, target, nx=81, lo=-4.0, hi=3.0, depth=1):
    g = hjb.with_stable_nt(model, hjb.GridSpec(lo, hi, nx, 1, depth=depth), target.T)
    return hjb.solve_vi(model, law, target, g)


def test_dpp_at_start_is_zero(desk):
    surf = _surface(desk.model, FORK, desk.target)
    prob = Problem(desk.model, FORK, desk.target)
    res = dpp_residual(prob, 0.0, PointMeasure.single(ROOT, [0.0]), 0.0, surf, n_paths=100, seed=1)
    assert res.violation_rate == 0.0 and res.out_of_grid_rate == 0.0


def test_dpp_deterministic_model():
    model = tabulated_model([0.0, 1.0], [0.3, 0.3], [0.0, 0.0], [-0.1, -0.1], [0.0, 0.0])
    target = affine_target(slope=0.5)
    surf = _surface(model, NO_BRANCH, target, nx=141, depth=0)
    prob = Problem(model, NO_BRANCH, target)
    res = dpp_residual(prob, 0.0, PointMeasure.single(ROOT, [0.0]), 0.5, surf, n_paths=20, seed=1, slack=0.0)
    assert res.violation_rate == 0.0


def test_dpp_desk(desk):
    surf = _surface(desk.model, FORK, desk.target, nx=161, lo=-6.0, hi=2.0, depth=3)
    prob = Problem(desk.model, FORK, desk.target)
    res = dpp_residual(prob, 0.0, PointMeasure.single(ROOT, [0.0]), 0.5, surf, n_paths=1000, seed=2)
    assert res.violation_rate <= 0.05


def test_dpp_rejects_uncovered_interval(desk):
    surf = _surface(desk.model, FORK, desk.target)
    prob = Problem(desk.model, FORK, desk.target)
    with pytest.raises(ValueError):
        dpp_residual(prob, 0.0, PointMeasure.single(ROOT, [0.0]), 1.5, surf)


def test_dpp_at_first_branch_time():
    # theta = first grid time at or after the first branching (a stopping time), capped at T
    sc = fintech_scenario(0.1, 0.2, 0.02, 1.5, option="call")
    law = OffspringLaw(1.0, ((2, 1.0),))
    surf = _surface(sc.model, law, sc.target, nx=121, lo=-3.0, hi=3.0, depth=2)
    y0 = float(surf.value([ROOT], 0.0, [0.0])[0]) + 0.05
    from branch_target.simulate import SimConfig, simulate_paths
    n = 400
    batch = simulate_paths(0.0, PointMeasure.single(ROOT, [0.0, y0]), sc.model, law, surf.feedback_control(),
                           SimConfig(dt=0.01, seed=9, record=True), 1.0, n_paths=n)
    times = np.array([s.time for s in batch.snapshots])
    first = np.full(n, 1.0)
    np.minimum.at(first, batch.event_path, batch.event_time)
    k_theta = np.searchsorted(times, first - 1e-12)
    bad = np.zeros(n, bool)
    for k in np.unique(k_theta):
        snap = batch.snapshots[k]
        sel = np.isin(snap.path, np.flatnonzero(k_theta == k))
        v = surf.value([snap.labels[i] for i in np.flatnonzero(sel)], np.full(sel.sum(), snap.time), snap.x[sel, 0])
        bad[snap.path[sel][snap.y[sel] < v - 0.05]] = True
    assert (first < 1.0).mean() > 0.3
    assert bad.mean() <= 0.05
