"""Acceptance checks shared by ``branch-target verify`` and the test suite.

Each check returns a :class:`CheckResult`; thresholds and sample sizes are
the acceptance values unless a caller overrides them.
"""
from __future__ import annotations

import json
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hjb
from .labels import ROOT, Label
from .model import OffspringLaw, fintech_scenario
from .population import PointMeasure
from .scenario import Scenario, desk_scenario
from .simulate import (ConstantControl, FeedbackFunction, SimConfig, population_growth_report, riskless,
                       simulate_paths)
from .target import Problem, branching_consistency, dpp_residual, pathwise_monotonicity, terminal_margins


@dataclass
class CheckResult:
    key: str
    title: str
    passed: bool
    summary: str
    data: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} [{self.key}] {self.title}: {self.summary} ({self.seconds:.1f}s)"

    def to_json(self) -> dict:
        return {"key": self.key, "title": self.title, "passed": bool(self.passed), "summary": self.summary,
                "seconds": round(self.seconds, 3), "data": _jsonable(self.data)}


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, (np.integer, np.bool_)):
        return v.item()
    return v


def _problem(sc: Scenario) -> Problem:
    return Problem(sc.model, sc.law, sc.target, dt=sc.sim.dt)


def _root_x0(sc: Scenario) -> float:
    return float(sc.initial.points[0, 0])


def solve_surface(sc: Scenario, grid: hjb.GridSpec | None = None) -> hjb.ValueSurface:
    g = hjb.with_stable_nt(sc.model, grid or sc.grid_or_default(), sc.target.T)
    return hjb.solve_vi(sc.model, sc.law, sc.target, g)


def _require_fintech(sc: Scenario):
    if sc.fintech is None:
        raise ValueError("this check needs a fintech scenario")
    return sc.fintech


def feedback_demo(t, x, y):
    return np.clip(0.5 + 0.1 * x[:, 0], 0.0, 1.0)


# ---------------------------------------------------------------- 1


def check_population_bound(sc: Scenario, n_paths: int = 10_000, seed: int = 11) -> CheckResult:
    t = time.perf_counter()
    law = OffspringLaw(1.0, ((0, 0.5), (2, 0.5)))
    mu = PointMeasure.single(ROOT, [_root_x0(sc), 0.0])
    batch = simulate_paths(0.0, mu, sc.model, law, riskless(), SimConfig(dt=sc.sim.dt, seed=seed), 1.0,
                           n_paths=n_paths)
    rep = population_growth_report(batch, law)
    secs = time.perf_counter() - t
    ok = rep.within_bound and secs < 30
    return CheckResult("1", "population bound", ok,
                       f"mean sup|V|={rep.mean_sup_size:.4f} SE={rep.se:.4f} bound e={rep.bound:.4f}",
                       {"mean": rep.mean_sup_size, "se": rep.se, "bound": rep.bound, "n_paths": n_paths}, secs)


# ---------------------------------------------------------------- 2


def check_monotonicity(sc: Scenario, n_paths: int = 1000, seed: int = 12, dy: float = 0.1) -> CheckResult:
    t = time.perf_counter()
    prob = _problem(sc)
    controls = [riskless(), ConstantControl(0.5), FeedbackFunction(feedback_demo, "clip(0.5+0.1x)")]
    total = comps = 0
    for ctrl in controls:
        v, c = pathwise_monotonicity(prob, sc.t0, sc.initial, 0.0, dy, ctrl, n_paths, seed)
        total += v
        comps += c
    secs = time.perf_counter() - t
    return CheckResult("2", "pathwise monotonicity", total == 0,
                       f"{total} violations over {comps} recorded comparisons",
                       {"violations": total, "comparisons": comps}, secs)


# ---------------------------------------------------------------- 3


def two_particle_measure() -> PointMeasure:
    return PointMeasure.from_entries([(Label((0,)), [0.0]), (Label((1,)), [math.log(0.5)])])


def constant_family():
    return [riskless()] + [ConstantControl(a) for a in (0.25, 0.5, 0.75, 1.0)]


def check_branching(sc: Scenario, n_paths: int = 4000, seed: int = 13, tol: float = 0.05) -> CheckResult:
    fin = _require_fintech(sc)
    t = time.perf_counter()
    bracket = (fin.lower_bound(sc.t0) - 0.1, fin.upper_bound(sc.t0) + 0.1)
    res = branching_consistency(_problem(sc), sc.t0, two_particle_measure(), constant_family(), bracket,
                                n_paths=n_paths, seed=seed, tol=tol)
    secs = time.perf_counter() - t
    singles = [None if s is None else s.y_hat for s in res.singles]
    ok = res.gap <= 0.15 and secs < 120
    return CheckResult("3", "branching property", ok,
                       f"joint={res.lhs.y_hat:.4f} max single={res.rhs:.4f} gap={res.gap:.4f} (<= 0.15)",
                       {"lhs": res.lhs.y_hat, "singles": singles, "gap": res.gap, "n_paths": n_paths}, secs)


# ---------------------------------------------------------------- 4


def check_bracket(sc: Scenario, surface: hjb.ValueSurface | None = None, tol: float = 1e-2) -> CheckResult:
    fin = _require_fintech(sc)
    t = time.perf_counter()
    surface = surface or solve_surface(sc)
    v = float(surface.value([ROOT], sc.t0, [_root_x0(sc)])[0])
    lo, hi = fin.lower_bound(sc.t0), fin.upper_bound(sc.t0)
    secs = time.perf_counter() - t
    ok = lo - tol <= v <= hi + tol and secs < 60
    return CheckResult("4", "value bracket", ok, f"v(0,x0)={v:.4f} in [{lo:.4f}, {hi:.4f}] +/- {tol:g}",
                       {"value": v, "lower": lo, "upper": hi, "gap_to_upper": hi - v}, secs)


# ---------------------------------------------------------------- 5


def feedback_failure_rate(sc: Scenario, surface: hjb.ValueSurface, y0: float, n_paths: int, seed: int,
                          x0: float | None = None) -> float:
    x0 = _root_x0(sc) if x0 is None else x0
    mu = PointMeasure.single(ROOT, [x0, y0])
    batch = simulate_paths(sc.t0, mu, sc.model, sc.law, surface.feedback_control(),
                           SimConfig(dt=sc.sim.dt, seed=seed), sc.target.T, n_paths=n_paths)
    return float(np.mean(terminal_margins(batch, sc.target) < 0))


def check_feedback_above(sc: Scenario, surface: hjb.ValueSurface | None = None, n_paths: int = 2000,
                         seed: int = 15, x0: float | None = None) -> CheckResult:
    t = time.perf_counter()
    surface = surface or solve_surface(sc)
    x0 = _root_x0(sc) if x0 is None else x0
    v = float(surface.value([ROOT], sc.t0, [x0])[0])
    fr = feedback_failure_rate(sc, surface, v + 0.05, n_paths, seed, x0)
    secs = time.perf_counter() - t
    return CheckResult("5a", "PDE feedback from v+0.05", fr <= 0.05, f"failure rate {fr:.4f} (<= 0.05)",
                       {"value": v, "x0": x0, "failure_rate": fr}, secs)


def check_feedback_below(sc: Scenario, surface: hjb.ValueSurface | None = None, n_paths: int = 2000,
                         seed: int = 15, x0: float | None = None) -> CheckResult:
    t = time.perf_counter()
    surface = surface or solve_surface(sc)
    x0 = _root_x0(sc) if x0 is None else x0
    v = float(surface.value([ROOT], sc.t0, [x0])[0])
    fr = feedback_failure_rate(sc, surface, v - 0.2, n_paths, seed, x0)
    secs = time.perf_counter() - t
    return CheckResult("5b", "PDE feedback from v-0.2", fr >= 0.5, f"failure rate {fr:.4f} (>= 0.5)",
                       {"value": v, "x0": x0, "failure_rate": fr}, secs)


# ---------------------------------------------------------------- 6


def check_kernel_geometry(sc: Scenario, n: int = 100, seed: int = 16, tol: float = 1e-12) -> CheckResult:
    fin = _require_fintech(sc)
    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    model, c = sc.model, fin.c
    grid = model.controls
    h = model.control_step
    eps = hjb.auto_epsilon(model)
    worst_n = worst_d = 0.0
    set_mismatch = 0
    for x, p in zip(rng.uniform(-3, 3, n), rng.uniform(-0.5, 1.5, n)):
        N = model.mismatch(np.full((grid.size, 1), x), np.full((grid.size, 1), p), grid)[:, 0]
        worst_n = max(worst_n, float(np.max(np.abs(N - c * (grid - p)))))
        got = hjb.kernel(model, x, p, eps)
        want = grid[np.abs(grid - p) <= h / 2]
        set_mismatch += int(not np.array_equal(got, want))
        # zero slack recovers {p} exactly at grid points
        snapped = grid[int(np.clip(np.rint(p / h), 0, grid.size - 1))]
        set_mismatch += int(not np.array_equal(hjb.kernel(model, x, snapped, 0.0), [snapped]))
        worst_d = max(worst_d, abs(hjb.delta_distance(model, x, p) - c * min(p, 1 - p)))
    secs = time.perf_counter() - t
    ok = worst_n <= tol and worst_d <= tol and set_mismatch == 0
    return CheckResult("6", "kernel geometry", ok,
                       f"max|N-c(a-p)|={worst_n:.1e} max|delta-c min(p,1-p)|={worst_d:.1e} set mismatches={set_mismatch}",
                       {"mismatch_err": worst_n, "delta_err": worst_d, "set_mismatch": set_mismatch}, secs)


# ---------------------------------------------------------------- 7


def _per_path_stats(snap, n_paths):
    size = np.bincount(snap.path, minlength=n_paths).astype(float)
    sx = np.bincount(snap.path, weights=snap.x[:, 0], minlength=n_paths)
    sy = np.bincount(snap.path, weights=snap.y, minlength=n_paths)
    return {"size": size, "sum_x": sx, "sum_y": sy}


def _z(a, b):
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    return 0.0 if se == 0 else abs(a.mean() - b.mean()) / se


def check_flow(sc: Scenario, n_paths: int = 10_000, seed: int = 17) -> CheckResult:
    t = time.perf_counter()
    T = sc.target.T
    theta = sc.t0 + 0.5 * (T - sc.t0)
    ctrl = FeedbackFunction(feedback_demo, "clip(0.5+0.1x)")
    mu = sc.initial.extend_dim(0.0)
    dt = sc.sim.dt
    full = simulate_paths(sc.t0, mu, sc.model, sc.law, ctrl, SimConfig(dt=dt, seed=seed), T, n_paths=n_paths)
    half = simulate_paths(sc.t0, mu, sc.model, sc.law, ctrl, SimConfig(dt=dt, seed=seed + 1), theta,
                          n_paths=n_paths)
    # fresh seed for the second leg: step counters restart at theta
    rest = simulate_paths(theta, half.terminal_measures(), sc.model, sc.law, ctrl,
                          SimConfig(dt=dt, seed=seed + 2), T)
    a, b = _per_path_stats(full.terminal, n_paths), _per_path_stats(rest.terminal, n_paths)
    zs = {k: _z(a[k], b[k]) for k in a}
    secs = time.perf_counter() - t
    return CheckResult("7", "flow / restart at T/2", max(zs.values()) < 4,
                       " ".join(f"z_{k}={v:.2f}" for k, v in zs.items()) + " (< 4)", {"z": zs, "n_paths": n_paths},
                       secs)


# ---------------------------------------------------------------- 8


SMOOTH_CALL = dict(b=0.1, c=0.2, r=0.02, kappa=1.5, T=1.0, strike0=1.0, option="call")


def check_vi_structure(sc: Scenario, surface: hjb.ValueSurface | None = None, tol: float = 1e-12) -> CheckResult:
    t = time.perf_counter()
    surface = surface or solve_surface(sc)
    obst = hjb.obstacle_violation(surface)
    lift = hjb.facelift_defect(surface)
    base = sc.grid_or_default()
    desk_grid = hjb.GridSpec(base.x_lo, base.x_hi, base.nx, base.nt, depth=1)
    desk_vals, desk_ratio = hjb.self_convergence(sc.model, sc.law, sc.target, desk_grid, _root_x0(sc), levels=3)
    smooth = fintech_scenario(**SMOOTH_CALL)
    sm_vals, sm_ratio = hjb.self_convergence(smooth.model, sc.law, smooth.target,
                                             hjb.GridSpec(-2.0, 2.0, 101, 10, depth=0), 0.0, levels=3)
    secs = time.perf_counter() - t
    ok = (obst <= tol) and (lift <= tol) and max(desk_ratio) <= 0.6 and max(sm_ratio) <= 0.6
    return CheckResult(
        "8", "VI structure and self-convergence", ok,
        f"obstacle excess={obst:.1e} facelift defect={lift:.1e} ratio desk={desk_ratio[0]:.3f} "
        f"smooth call={sm_ratio[0]:.3f} (<= 0.6)",
        {"obstacle_excess": obst, "facelift_defect": lift, "desk_values": desk_vals, "desk_ratio": desk_ratio,
         "smooth_values": sm_vals, "smooth_ratio": sm_ratio},
        secs,
    )


# ---------------------------------------------------------------- 9


def check_determinism(sc: Scenario, n_paths: int = 100) -> CheckResult:
    from . import cli

    t = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        scen = tmp / "scenario.json"
        scen.write_text(json.dumps(sc.raw))
        digests = []
        for run in ("a", "b"):
            out = tmp / run
            codes = [
                cli.main(["simulate", str(scen), "--paths", str(n_paths), "--seed", "5", "--out", str(out / "sim")]),
                cli.main(["solve", str(scen), "--out", str(out / "solve"), "--no-truncation-check"]),
            ]
            if any(codes):
                return CheckResult("9", "determinism", False, f"command exit codes {codes}", {}, time.perf_counter() - t)
            digests.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*.csv"))})
        same = digests[0] == digests[1] and len(digests[0]) > 0
    secs = time.perf_counter() - t
    return CheckResult("9", "determinism", same, f"{len(digests[0])} CSV files {'identical' if same else 'DIFFER'}",
                       {"files": sorted(digests[0])}, secs)


# ---------------------------------------------------------------- extras


def check_strike_bound(sc: Scenario) -> CheckResult:
    fin = _require_fintech(sc)
    ok = fin.strikes_bounded()
    return CheckResult("bound", "strike boundedness", ok, f"sup strike={fin.strike_sup:g}",
                       {"strike0": fin.strike0, "bound": fin.strike_sup})


def check_dpp(sc: Scenario, surface: hjb.ValueSurface | None = None, n_paths: int = 2000, seed: int = 18,
              slack: float = 0.05) -> CheckResult:
    t = time.perf_counter()
    surface = surface or solve_surface(sc)
    theta = sc.t0 + 0.5 * (sc.target.T - sc.t0)
    res = dpp_residual(_problem(sc), sc.t0, sc.initial, theta, surface, n_paths=n_paths, seed=seed, slack=slack)
    secs = time.perf_counter() - t
    return CheckResult("dpp", "DPP residual at T/2", res.violation_rate <= 0.05,
                       f"violation rate {res.violation_rate:.4f} off-grid {res.out_of_grid_rate:.4f} (<= 0.05)",
                       {"violation_rate": res.violation_rate, "off_grid": res.out_of_grid_rate}, secs)


def check_truncation(sc: Scenario) -> CheckResult:
    t = time.perf_counter()
    base = sc.grid_or_default()
    s0 = solve_surface(sc, base)
    deeper = hjb.GridSpec(base.x_lo, base.x_hi, base.nx, base.nt, base.depth + 1, base.offspring_index_cap,
                          base.epsilon)
    s1 = solve_surface(sc, deeper)
    diff = float(np.max(np.abs(s0.slice(ROOT) - s1.slice(ROOT))))
    secs = time.perf_counter() - t
    return CheckResult("trunc", f"tree depth {base.depth} vs {base.depth + 1}", diff <= 1e-2,
                       f"max root difference {diff:.2e} (<= 1e-2)", {"max_root_diff": diff}, secs)


def run_suite(sc: Scenario | None = None, level: str = "fast", echo=None) -> list[CheckResult]:
    """Run every acceptance check (plus supplementary ones at ``level='full'``)."""
    if level not in ("fast", "full"):
        raise ValueError("level must be 'fast' or 'full'")
    sc = sc or desk_scenario()
    results = []

    def add(r):
        results.append(r)
        if echo:
            echo(r.line())

    if sc.fintech is not None:
        add(check_strike_bound(sc))
        if not results[-1].passed:
            # the bracket, the default grid and the tree truncation all assume bounded strikes
            return results
    add(check_population_bound(sc))
    add(check_monotonicity(sc))
    surface = solve_surface(sc)
    if sc.fintech is not None:
        add(check_branching(sc))
        add(check_bracket(sc, surface))
    add(check_feedback_above(sc, surface))
    add(check_feedback_below(sc, surface))
    if sc.fintech is not None:
        add(check_kernel_geometry(sc))
    add(check_flow(sc))
    add(check_vi_structure(sc, surface))
    add(check_determinism(sc))
    if level == "full":
        add(check_dpp(sc, surface))
        add(check_truncation(sc))
    return results
