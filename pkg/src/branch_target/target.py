"""Monte Carlo stochastic-target engine.

The almost-sure terminal constraint is replaced by a failure tolerance
``eta``: a level ``y`` is accepted for a control when at most a fraction
``eta`` of the simulated paths ends with some alive particle below its
payoff. All evaluations of one estimate reuse the same seed, so acceptance is
monotone in ``y`` path by path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .labels import Label
from .model import CoefficientModel, OffspringLaw, TargetSpec
from .population import PointMeasure
from .simulate import PathBatch, PopulationPath, SimConfig, simulate_paths


class BracketError(ValueError):
    """The admissibility predicate does not change sign on the bracket."""

    def __init__(self, msg: str, side: str):
        super().__init__(msg)
        self.side = side


@dataclass(frozen=True)
class Problem:
    model: CoefficientModel
    law: OffspringLaw
    target: TargetSpec
    dt: float = 0.01

    @property
    def T(self) -> float:
        return self.target.T


@dataclass(frozen=True)
class TargetVerdict:
    success: bool
    violated_labels: list
    margin: float


def terminal_success(path: PopulationPath, target: TargetSpec) -> TargetVerdict:
    mu = path.terminal_state
    if len(mu) == 0:
        return TargetVerdict(True, [], math.inf)
    x, y = mu.points[:, :-1], mu.points[:, -1]
    margins = y - target.payoff(list(mu.labels), x)
    bad = [lab for lab, m in zip(mu.labels, margins) if m < 0]
    return TargetVerdict(not bad, bad, float(margins.min()))


def terminal_margins(batch: PathBatch, target: TargetSpec) -> np.ndarray:
    """Per path ``min_i (Y_T^i - g_i(X_T^i))``; ``+inf`` for extinct paths."""
    out = np.full(batch.n_paths, np.inf)
    term = batch.terminal
    if term.path.size:
        m = term.y - target.payoff(term.labels, term.x)
        np.minimum.at(out, term.path, m)
    return out


def _run(problem: Problem, t0, mu0: PointMeasure, y, control, n_paths, seed, threads=None, record=False, T=None):
    cfg = SimConfig(dt=problem.dt, seed=seed, record=record)
    return simulate_paths(t0, mu0.extend_dim(y), problem.model, problem.law, control, cfg,
                          problem.T if T is None else T, n_paths=n_paths, threads=threads)


def success_probability(problem: Problem, t0: float, mu0: PointMeasure, y: float, control,
                        n_paths: int, seed: int, threads: int | None = None) -> tuple[float, float]:
    """Fraction of paths meeting the terminal constraint from common level ``y``."""
    if n_paths < 1:
        raise ValueError("need at least one path")
    batch = _run(problem, t0, mu0, y, control, n_paths, seed, threads)
    ok = terminal_margins(batch, problem.target) >= 0
    rate = float(ok.mean())
    return rate, math.sqrt(rate * (1 - rate) / n_paths)


@dataclass
class ValueEstimate:
    y_hat: float
    failure_rate_at_y_hat: float
    ci_halfwidth: float
    n_paths: int
    bisection_tol: float
    control_id: str
    bracket: tuple[float, float]
    trace: list = field(default_factory=list, repr=False)


def estimate_value(
    problem: Problem,
    t0: float,
    mu0: PointMeasure,
    controls: Sequence,
    bracket: tuple[float, float],
    eta: float = 0.01,
    n_paths: int = 1000,
    seed: int = 0,
    tol: float = 0.05,
    threads: int | None = None,
) -> ValueEstimate:
    """Smallest ``y`` (to ``tol``) at which some control fails on at most ``eta`` of the paths.

    Since the family is a subset of all controls, the result is an upper
    estimate of the value up to Monte Carlo error.
    """
    y_lo, y_hi = map(float, bracket)
    if not y_lo < y_hi:
        raise BracketError("bracket must satisfy y_lo < y_hi", "order")
    trace = []

    def failure(y, ctrl):
        rate, se = success_probability(problem, t0, mu0, y, ctrl, n_paths, seed, threads)
        trace.append((y, ctrl.name, 1.0 - rate, se))
        return 1.0 - rate

    feasible = [c for c in controls if failure(y_hi, c) <= eta]
    if not feasible:
        raise BracketError(f"no control reaches the target at y_hi={y_hi}", "high")
    if any(failure(y_lo, c) <= eta for c in controls):
        raise BracketError(f"target already reachable at y_lo={y_lo}", "low")

    best = None
    for ctrl in feasible:
        lo, hi = y_lo, y_hi
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if failure(mid, ctrl) <= eta:
                hi = mid
            else:
                lo = mid
        cand = 0.5 * (lo + hi)
        if best is None or cand < best[0]:
            best = (cand, ctrl)
    y_hat, ctrl = best
    fr = failure(y_hat, ctrl)
    se = math.sqrt(fr * (1 - fr) / n_paths)
    return ValueEstimate(y_hat, fr, 1.96 * se, n_paths, tol, ctrl.name, (y_lo, y_hi), trace)


@dataclass
class BranchingCheck:
    lhs: ValueEstimate
    singles: list
    rhs: float
    gap: float


def branching_consistency(
    problem: Problem,
    t0: float,
    mu0: PointMeasure,
    controls: Sequence,
    bracket: tuple[float, float],
    eta: float = 0.01,
    n_paths: int = 1000,
    seed: int = 0,
    tol: float = 0.05,
    threads: int | None = None,
) -> BranchingCheck:
    """Compare the joint estimate with the max of per-particle estimates.

    Label-keyed noise makes each singleton run see exactly the randomness its
    particle sees in the joint run.
    """
    if len(mu0) < 2:
        raise ValueError("need at least two particles")
    lhs = estimate_value(problem, t0, mu0, controls, bracket, eta, n_paths, seed, tol, threads)
    singles = []
    for lab, x in mu0:
        single = PointMeasure.from_entries([(lab, x)], dim=mu0.dim)
        try:
            singles.append(estimate_value(problem, t0, single, controls, bracket, eta, n_paths, seed, tol, threads))
        except BracketError as err:
            if err.side != "low":
                raise
            # never binding within the bracket
            singles.append(None)
    vals = [s.y_hat for s in singles if s is not None]
    rhs = max(vals) if vals else -math.inf
    return BranchingCheck(lhs, singles, rhs, abs(lhs.y_hat - rhs))


def pathwise_monotonicity(problem: Problem, t0: float, mu0: PointMeasure, y: float, dy: float, control,
                          n_paths: int, seed: int, threads: int | None = None) -> tuple[int, int]:
    """Count recorded times where the shifted target path falls below the base one.

    Returns ``(violations, comparisons)``. Both runs share every random draw.
    """
    lo = _run(problem, t0, mu0, y, control, n_paths, seed, threads, record=True)
    hi = _run(problem, t0, mu0, y + dy, control, n_paths, seed, threads, record=True)
    violations = comparisons = 0
    for a, b in zip(lo.snapshots, hi.snapshots):
        if not (np.array_equal(a.path, b.path) and a.labels == b.labels):
            raise RuntimeError("coupled runs diverged in their population structure")
        violations += int(np.count_nonzero(b.y < a.y))
        comparisons += a.y.size
    return violations, comparisons


@dataclass(frozen=True)
class DppResult:
    violation_rate: float
    out_of_grid_rate: float
    n_paths: int
    y0: float


def dpp_residual(problem: Problem, t0: float, mu0: PointMeasure, theta: float, surface, control=None,
                 n_paths: int = 1000, seed: int = 0, slack: float = 0.05,
                 threads: int | None = None) -> DppResult:
    """Fraction of paths where some particle at ``theta`` sits below ``v(theta, X) - slack``.

    The run starts from ``y0 = max_i v_i(t0, x_i) + slack`` and, by default,
    uses the feedback extracted from ``surface``. Particles outside the
    surface's x-range are tallied separately.
    """
    if not (surface.t[0] - 1e-12 <= t0 and theta <= surface.t[-1] + 1e-12):
        raise ValueError("surface does not cover [t0, theta]")
    if not t0 <= theta:
        raise ValueError("theta must not precede t0")
    x0 = mu0.points
    v0 = surface.value(list(mu0.labels), np.full(len(mu0), t0), x0[:, 0])
    y0 = float(np.max(v0)) + slack
    if control is None:
        control = surface.feedback_control()
    batch = _run(problem, t0, mu0, y0, control, n_paths, seed, threads, T=theta)
    term = batch.terminal
    viol = np.zeros(n_paths, bool)
    off = np.zeros(n_paths, bool)
    if term.path.size:
        xs = term.x[:, 0]
        inside = surface.contains(xs)
        v = surface.value(term.labels, np.full(xs.size, theta), xs)
        bad = inside & (term.y < v - slack)
        viol[term.path[bad]] = True
        off[term.path[~inside]] = True
    return DppResult(float(viol.mean()), float(off.mean()), n_paths, y0)
