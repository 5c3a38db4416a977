import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from branch_target import rng
from branch_target.labels import ROOT, Label, is_ancestor
from branch_target.model import CoefficientModel, OffspringLaw, tabulated_model
from branch_target.population import PointMeasure, validate
from branch_target.simulate import (ConstantControl, ExplosionError, FeedbackFunction, SimConfig, euler_step,
                                    population_growth_report, restart, riskless, simulate, simulate_paths,
                                    time_grid)


def L(*d):
    return Label(d)


def start(x=0.0, y=0.0):
    return PointMeasure.single(ROOT, [x, y])


def const_model(lam=0.3, sig=0.0, lam_y=-0.1, sig_y=0.0, ky=0.0):
    return tabulated_model([0.0, 1.0], [lam, lam], [sig, sig], [lam_y, lam_y], [sig_y, sig_y], target_drift_y=ky)


# ---------------------------------------------------------------- rng


def test_uniforms_open_interval_and_deterministic():
    keys = rng.derive(7, np.arange(5000))
    u = rng.uniforms(keys, rng.NOISE, 3)
    assert np.all((u > 0) & (u < 1))
    assert np.array_equal(u, rng.uniforms(keys, rng.NOISE, 3))
    assert not np.array_equal(u, rng.uniforms(keys, rng.NOISE, 4))


def test_normals_moments():
    z = rng.normals(rng.derive(1, np.arange(200_000)), rng.NOISE, 0)[:, 0]
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_label_keys_consistent():
    k = rng.label_key(L(1, 0))
    step = rng.child_label_keys(np.array([rng.label_key(L(1))]), np.array([0]))[0]
    assert k == step and k != rng.label_key(L(0, 1))


# ---------------------------------------------------------------- engine


def test_time_grid():
    g = time_grid(0.0, 1.0, 0.3)
    assert g[0] == 0.0 and g[-1] == 1.0 and g.size == 5
    assert time_grid(0.0, 1.0, 0.01).size == 101


def test_no_branching_keeps_labels():
    law = OffspringLaw(0.0, ((2, 1.0),))
    mu = PointMeasure.from_entries([(L(0), [0.0, 0.0]), (L(1), [1.0, 0.0])])
    p = simulate(0.0, mu, const_model(sig=0.2, sig_y=0.1), law, riskless(), SimConfig(record=True), 1.0)
    assert p.events == []
    assert all(s.labels == mu.labels for s in p.states)


def test_deterministic_limit_exact():
    law = OffspringLaw(0.0, ((1, 1.0),))
    p = simulate(0.2, start(1.0, 2.0), const_model(), law, riskless(), SimConfig(dt=0.01), 1.0)
    x, y = p.terminal_state.points[0]
    assert x == pytest.approx(1.0 + 0.3 * 0.8, abs=1e-12)
    assert y == pytest.approx(2.0 - 0.1 * 0.8, abs=1e-12)


def test_branching_with_constant_drift_is_exact():
    # children inherit the parent's state at the exact branch time
    law = OffspringLaw(3.0, ((0, 0.2), (1, 0.2), (2, 0.6)))
    b = simulate_paths(0.0, start(), const_model(), law, riskless(), SimConfig(dt=0.05, seed=4), 1.0, n_paths=200)
    assert b.event_path.size > 100
    assert np.allclose(b.terminal.x[:, 0], 0.3, atol=1e-12)
    assert np.allclose(b.terminal.y, -0.1, atol=1e-12)


def test_recorded_states_are_antichains_and_events_ordered():
    law = OffspringLaw(2.0, ((0, 0.3), (2, 0.7)))
    b = simulate_paths(0.0, start(), const_model(sig=0.3, sig_y=0.1), law, riskless(),
                       SimConfig(dt=0.02, seed=9, record=True), 1.0, n_paths=30)
    for j in range(b.n_paths):
        path = b.path(j)
        assert all(validate(s) for s in path.states)
        times = [e.time for e in path.events]
        assert times == sorted(times) and len(set(times)) == len(times)
        for e in path.events:
            assert 0.0 < e.time <= 1.0
        alive = path.terminal_state.labels
        for a in alive:
            assert not any(is_ancestor(a, c, strict=True) for c in alive)


def test_determinism_and_thread_independence():
    law = OffspringLaw(1.0, ((0, 0.4), (3, 0.6)))
    model = const_model(sig=0.3, sig_y=0.2)
    runs = [simulate_paths(0.0, start(), model, law, ConstantControl(0.3), SimConfig(seed=3), 1.0, n_paths=50,
                           threads=t) for t in (1, 1, 3)]
    for other in runs[1:]:
        assert np.array_equal(runs[0].terminal.x, other.terminal.x)
        assert np.array_equal(runs[0].terminal.y, other.terminal.y)
        assert runs[0].terminal.labels == other.terminal.labels
        assert np.array_equal(runs[0].event_time, other.event_time)


def test_path_index_offsets_match_batch():
    law = OffspringLaw(1.0, ((0, 0.5), (2, 0.5)))
    model = const_model(sig=0.3)
    batch = simulate_paths(0.0, start(), model, law, riskless(), SimConfig(seed=2), 1.0, n_paths=6)
    single = simulate(0.0, start(), model, law, riskless(), SimConfig(seed=2, path_index=4), 1.0)
    assert single.terminal_state == batch.path(4).terminal_state


def test_adding_a_particle_leaves_others_untouched():
    law = OffspringLaw(1.0, ((0, 0.5), (2, 0.5)))
    model = const_model(sig=0.3, sig_y=0.2)
    one = PointMeasure.from_entries([(L(0), [0.0, 0.0])])
    two = PointMeasure.from_entries([(L(0), [0.0, 0.0]), (L(1), [0.5, 0.0])])
    a = simulate(0.0, one, model, law, riskless(), SimConfig(seed=8), 1.0).terminal_state
    b = simulate(0.0, two, model, law, riskless(), SimConfig(seed=8), 1.0).terminal_state
    for lab, pt in a:
        assert np.array_equal(b.point(lab), pt)


def test_explosion_cap():
    law = OffspringLaw(5.0, ((3, 1.0),))
    with pytest.raises(ExplosionError):
        simulate_paths(0.0, start(), const_model(), law, riskless(), SimConfig(max_population=50), 1.0, n_paths=2)


def test_restart_rules():
    law = OffspringLaw(1.0, ((0, 0.5), (2, 0.5)))
    model = const_model(sig=0.3)
    p = simulate(0.0, start(), model, law, riskless(), SimConfig(dt=0.1, seed=1, record=True), 1.0)
    end = restart(p, 1.0, model, law, riskless(), SimConfig(seed=2), 1.0)
    assert end.terminal_state == p.terminal_state
    with pytest.raises(ValueError):
        restart(p, 0.55, model, law, riskless(), SimConfig(seed=2), 1.0)
    mid = restart(p, 0.5, model, law, riskless(), SimConfig(seed=2), 1.0)
    assert mid.t0 == 0.5


def test_simulate_preconditions():
    law = OffspringLaw(1.0, ((1, 1.0),))
    bad = PointMeasure.from_entries([(L(0), [0.0, 0.0]), (L(0, 1), [0.0, 0.0])])
    with pytest.raises(ValueError):
        simulate(0.0, bad, const_model(), law, riskless(), SimConfig(), 1.0)
    with pytest.raises(ValueError):
        simulate(1.0, start(), const_model(), law, riskless(), SimConfig(), 1.0)
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)


# ---------------------------------------------------------------- growth


def test_growth_report_trivial_cases():
    model = const_model(sig=0.2)
    still = simulate_paths(0.0, start(), model, OffspringLaw(0.0, ((2, 1.0),)), riskless(), SimConfig(), 1.0,
                           n_paths=100)
    rep = population_growth_report(still, OffspringLaw(0.0, ((2, 1.0),)))
    assert rep.mean_sup_size == 1.0 and rep.bound == 1.0 and rep.within_bound
    death = OffspringLaw(2.0, ((0, 1.0),))
    rep = population_growth_report(simulate_paths(0.0, start(), model, death, riskless(), SimConfig(), 1.0,
                                                  n_paths=100), death)
    assert rep.mean_sup_size <= 1.0 and rep.bound == 1.0
    with pytest.raises(ValueError):
        population_growth_report(simulate_paths(0.0, start(), model, death, riskless(), SimConfig(), 1.0,
                                                n_paths=10), death)


def test_growth_bound_binary_splitting():
    law = OffspringLaw(1.0, ((2, 1.0),))
    b = simulate_paths(0.0, start(), const_model(), law, riskless(), SimConfig(seed=5), 1.0, n_paths=4000)
    rep = population_growth_report(b, law)
    assert rep.bound == pytest.approx(math.e**2)
    assert rep.within_bound
    # pure splitting: the supremum is the terminal size, with mean e^{gamma T}
    assert rep.mean_sup_size == pytest.approx(math.e, abs=4 * rep.se)


# ---------------------------------------------------------------- comparison and stability


@given(st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_monotone_comparison_per_step(dy, seed):
    law = OffspringLaw(1.5, ((0, 0.3), (2, 0.7)))
    model = const_model(sig=0.3, sig_y=0.4, ky=-0.7)
    fb = FeedbackFunction(lambda t, x, y: np.clip(0.5 + 0.2 * x[:, 0], 0, 1))
    lo = simulate_paths(0.0, start(0.0, 0.0), model, law, fb, SimConfig(dt=0.05, seed=seed, record=True), 1.0,
                        n_paths=5)
    hi = simulate_paths(0.0, start(0.0, dy), model, law, fb, SimConfig(dt=0.05, seed=seed, record=True), 1.0,
                        n_paths=5)
    for a, b in zip(lo.snapshots, hi.snapshots):
        assert a.labels == b.labels
        assert np.all(b.y >= a.y)


def _gbm_model(mu=0.1, s=0.4):
    return CoefficientModel(
        dim_x=1, dim_noise=1, controls=np.array([0.0]),
        drift=lambda x, a: mu * x, diffusion=lambda x, a: (s * x)[:, :, None],
        target_drift=lambda x, y, a: np.zeros(len(a)), target_diffusion=lambda x, a: np.zeros((len(a), 1)),
    )


def test_euler_strong_convergence(rng):
    mu, s, n_paths = 0.1, 0.4, 4000
    model = _gbm_model(mu, s)
    n_fine = 64
    dW = rng.normal(0.0, math.sqrt(1 / n_fine), (n_paths, n_fine))
    exact = np.exp((mu - s * s / 2) + s * dW.sum(axis=1))
    errs = []
    for n in (16, 32, 64):
        inc = dW.reshape(n_paths, n, n_fine // n).sum(axis=2)
        x, y = np.ones((n_paths, 1)), np.zeros(n_paths)
        a = np.zeros(n_paths)
        h = np.full(n_paths, 1 / n)
        for k in range(n):
            x, y = euler_step(model, x, y, a, h, inc[:, k : k + 1])
        errs.append(math.sqrt(np.mean((x[:, 0] - exact) ** 2)))
    # strong order 1/2 at least: halving dt shrinks the RMS error by about 2^-1/2 or better
    assert errs[1] < errs[0] * 0.85 and errs[2] < errs[1] * 0.85
