"""Explicit finite-difference solver for the label-coupled variational inequality (d = m = 1).

Each label ``i`` of a truncated tree carries a value slice ``v_i(t, x)``. One
backward step from ``t_{n+1}`` to ``t_n`` is

1. ``F`` from upwind first and central second differences of ``v^{n+1}``,
2. ``v <- v^{n+1} - dt F`` where the kernel is non-empty (unchanged elsewhere),
3. face-lift to the admissible slope cone,
4. obstacle ``v_i <- max(v_i, v_{i0}, ..., v_{i(K_max-1)})``.

Labels are stored as rows of one array; children sit after their parents in
breadth-first order, so the obstacle is applied deepest level first.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .labels import ROOT, Label, tree_labels
from .model import CoefficientModel, OffspringLaw, TargetSpec


class CFLError(ValueError):
    """The explicit scheme would be unstable on the requested grid."""

    def __init__(self, msg: str, dt_max: float):
        super().__init__(msg)
        self.dt_max = dt_max


@dataclass(frozen=True)
class GridSpec:
    x_lo: float
    x_hi: float
    nx: int
    nt: int
    depth: int = 1
    offspring_index_cap: int | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if not self.x_lo < self.x_hi:
            raise ValueError("x_lo must be below x_hi")
        if self.nx < 3 or self.nt < 1:
            raise ValueError("need nx >= 3 and nt >= 1")
        if self.depth < 0:
            raise ValueError("tree depth must be >= 0")
        if self.offspring_index_cap is not None and self.offspring_index_cap < 0:
            raise ValueError("offspring_index_cap must be >= 0")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("kernel slack must be >= 0")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.nx)

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.nx - 1)

    def refine(self) -> "GridSpec":
        """Halve both ``dx`` and ``dt``; the caller keeps the finest level CFL-stable."""
        return GridSpec(self.x_lo, self.x_hi, 2 * self.nx - 1, 2 * self.nt, self.depth,
                        self.offspring_index_cap, self.epsilon)


def with_stable_nt(model: CoefficientModel, grid: GridSpec, T: float) -> GridSpec:
    """``grid`` with ``nt`` raised to the smallest CFL-stable value if needed."""
    ok, dt_max = cfl_check(model, grid, T)
    if ok:
        return grid
    return GridSpec(grid.x_lo, grid.x_hi, grid.nx, math.ceil(T / dt_max), grid.depth,
                    grid.offspring_index_cap, grid.epsilon)


# ---------------------------------------------------------------- pointwise geometry


def _coeffs(model: CoefficientModel, x: np.ndarray):
    """``(lam, sig, sig_y)`` of shape ``(A, n)`` on controls x points."""
    if model.dim_x != 1 or model.dim_noise != 1:
        raise ValueError("the solver supports d = m = 1 only")
    x = np.asarray(x, dtype=float).ravel()
    A, n = model.controls.size, x.size
    X = np.tile(x, A).reshape(-1, 1)
    a = np.repeat(model.controls, n)
    lam = model.drift(X, a).reshape(A, n)
    sig = model.diffusion(X, a).reshape(A, n)
    sig_y = model.target_diffusion(X, a).reshape(A, n)
    return lam, sig, sig_y


def _target_drift(model: CoefficientModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``lam_Y`` of shape ``(A, n)``; ``x`` and ``y`` share shape ``(n,)``."""
    A, n = model.controls.size, x.size
    X = np.tile(x, A).reshape(-1, 1)
    return model.target_drift(X, np.tile(y, A), np.repeat(model.controls, n)).reshape(A, n)


def kernel(model: CoefficientModel, x: float, p: float, eps: float) -> np.ndarray:
    """Grid controls with ``|sigma_Y(x, a) - sigma(x, a) p| <= eps``; possibly empty."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    _, sig, sig_y = _coeffs(model, np.array([x]))
    N = sig_y[:, 0] - sig[:, 0] * p
    return model.controls[np.abs(N) <= eps]


def operator_F(model: CoefficientModel, x: float, y: float, p: float, M: float, eps: float) -> float:
    """Max over the kernel of ``lam_Y - lam p - sigma^2 M / 2``; ``-inf`` on an empty kernel."""
    xs = np.array([float(x)])
    lam, sig, sig_y = _coeffs(model, xs)
    lam_y = _target_drift(model, xs, np.array([float(y)]))
    inside = np.abs(sig_y[:, 0] - sig[:, 0] * p) <= eps
    if not inside.any():
        return -math.inf
    vals = lam_y[:, 0] - lam[:, 0] * p - 0.5 * sig[:, 0] ** 2 * M
    return float(np.max(vals[inside]))


def delta_distance(model: CoefficientModel, x: float, p: float) -> float:
    """Signed distance of 0 to the mismatch image ``[min_a N^a, max_a N^a]``.

    Positive iff 0 is interior, zero on the boundary, negative outside.
    """
    _, sig, sig_y = _coeffs(model, np.array([x]))
    N = sig_y[:, 0] - sig[:, 0] * p
    lo, hi = float(N.min()), float(N.max())
    mag = min(abs(lo), abs(hi))
    if lo < 0 < hi:
        return mag
    if lo == 0 or hi == 0:
        return 0.0
    return -mag


def admissible_slopes(model: CoefficientModel, x: np.ndarray | None = None) -> tuple[float, float]:
    """Slopes ``p`` with ``0`` in the mismatch image at every ``x``.

    With ``sigma`` of one sign across controls the set is
    ``[min sigma_Y / sigma, max sigma_Y / sigma]``; with ``sigma == 0`` it is the
    whole line when ``sigma_Y`` can vanish.
    """
    xs = np.zeros(1) if x is None else np.asarray(x, dtype=float).ravel()
    _, sig, sig_y = _coeffs(model, xs)
    if np.all(sig == 0):
        if np.all(sig_y.min(axis=0) <= 0) and np.all(sig_y.max(axis=0) >= 0):
            return -math.inf, math.inf
        raise ValueError("no slope makes the mismatch vanish")
    if not (np.all(sig > 0) or np.all(sig < 0)):
        raise ValueError("slope cone needs sigma of one sign across controls")
    ratio = sig_y / sig
    lo = float(np.max(ratio.min(axis=0)))
    hi = float(np.min(ratio.max(axis=0)))
    if lo > hi:
        raise ValueError("empty slope cone")
    return lo, hi


def auto_epsilon(model: CoefficientModel, x: float = 0.0) -> float:
    """Half the largest mismatch jump between neighbouring grid controls at ``p = 0``."""
    if model.controls.size < 2:
        return 0.0
    _, _, sig_y = _coeffs(model, np.array([x]))
    return 0.5 * float(np.max(np.abs(np.diff(sig_y[:, 0]))))


# ---------------------------------------------------------------- face-lift


def facelift(v: np.ndarray, dx: float, slope_lo: float, slope_hi: float) -> np.ndarray:
    """Smallest function above ``v`` with discrete slopes in ``[slope_lo, slope_hi]``.

    Works along the last axis. The forward pass bounds slopes from below, the
    backward pass from above; together they give the exact cone envelope.
    """
    if slope_lo > slope_hi:
        raise ValueError("slope_lo must not exceed slope_hi")
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    pos = dx * np.arange(n)
    out = v
    if math.isfinite(slope_lo):
        out = slope_lo * pos + np.maximum.accumulate(out - slope_lo * pos, axis=-1)
    if math.isfinite(slope_hi):
        tail = (out - slope_hi * pos)[..., ::-1]
        out = slope_hi * pos + np.maximum.accumulate(tail, axis=-1)[..., ::-1]
    return np.maximum(out, v)


def facelift_bruteforce(v: np.ndarray, dx: float, slope_lo: float, slope_hi: float) -> np.ndarray:
    """``max_j' (v_j' + cone(x_j - x_j'))`` by direct O(n^2) scan."""
    v = np.asarray(v, dtype=float)
    pos = dx * np.arange(v.size)
    diff = pos[:, None] - pos[None, :]
    with np.errstate(invalid="ignore"):
        cone = np.where(diff >= 0, slope_lo * diff, slope_hi * diff)
    cone[diff == 0] = 0.0
    return np.max(v[None, :] + cone, axis=1)


# ---------------------------------------------------------------- tree


@dataclass(frozen=True)
class _Tree:
    labels: list
    children: list  # per row, row indices of obstacle children
    depth_of: np.ndarray


def _tree(depth: int, width: int, k_realizable: int) -> _Tree:
    labels = tree_labels(depth, width) if width > 0 else [ROOT]
    index = {lab: k for k, lab in enumerate(labels)}
    children = []
    for lab in labels:
        kids = [index[lab.child(ell)] for ell in range(min(width, k_realizable)) if lab.child(ell) in index]
        children.append(kids)
    return _Tree(labels, children, np.array([lab.generation for lab in labels]))


def _apply_obstacle(v: np.ndarray, tree: _Tree) -> None:
    """In place, deepest level first, so grandchildren propagate upward."""
    for r in range(len(tree.labels) - 1, -1, -1):
        for c in tree.children[r]:
            np.maximum(v[r], v[c], out=v[r])


def terminal_tree_sup(target: TargetSpec, labels: list, children: list, x: np.ndarray,
                      slope_lo: float, slope_hi: float) -> np.ndarray:
    """``v_i(T) = facelift(max(g_i, v_ik(T)))`` bottom up; leaves get ``facelift(g_i)``."""
    dx = float(x[1] - x[0])
    L, nx = len(labels), x.size
    flat_labels = [lab for lab in labels for _ in range(nx)]
    g = target.payoff(flat_labels, np.tile(x, L).reshape(-1, 1)).reshape(L, nx)
    out = np.empty_like(g)
    for r in range(L - 1, -1, -1):
        s = g[r]
        for c in children[r]:
            s = np.maximum(s, out[c])
        out[r] = facelift(s, dx, slope_lo, slope_hi)
    return out


# ---------------------------------------------------------------- solver


def cfl_check(model: CoefficientModel, grid: GridSpec, T: float) -> tuple[bool, float]:
    """``dt <= dx^2 / (max sigma^2 + dx max |lam|)``; returns ``(ok, dt_max)``."""
    lam, sig, _ = _coeffs(model, grid.x)
    s2 = float(np.max(sig**2))
    drift = float(np.max(np.abs(lam)))
    dx = grid.dx
    denom = s2 + dx * drift
    dt_max = math.inf if denom == 0 else dx * dx / denom
    dt = T / grid.nt
    return dt <= dt_max * (1 + 1e-12), dt_max


def _derivatives(v: np.ndarray, dx: float, lo: float, hi: float):
    """Forward, backward, central first and central second differences.

    Ghost nodes continue each boundary with the one-sided slope clamped to the
    admissible cone.
    """
    s_l = np.clip((v[..., 1] - v[..., 0]) / dx, lo, hi)
    s_r = np.clip((v[..., -1] - v[..., -2]) / dx, lo, hi)
    ext = np.concatenate([(v[..., 0] - s_l * dx)[..., None], v, (v[..., -1] + s_r * dx)[..., None]], axis=-1)
    fwd = (ext[..., 2:] - ext[..., 1:-1]) / dx
    bwd = (ext[..., 1:-1] - ext[..., :-2]) / dx
    return fwd, bwd, 0.5 * (fwd + bwd), (fwd - bwd) / dx


def _hamiltonian(model, coeffs, x, v, dx, lo, hi, eps):
    """``F`` on every node of ``v`` (shape ``(L, nx)``), the selected control and the empty-kernel mask."""
    lam, sig, sig_y = coeffs  # (A, nx)
    L, nx = v.shape
    fwd, bwd, pc, M = _derivatives(v, dx, lo, hi)
    N = sig_y[:, None, :] - sig[:, None, :] * pc[None]  # (A, L, nx)
    absN = np.abs(N)
    inside = absN <= eps
    pu = np.where(lam[:, None, :] > 0, fwd[None], bwd[None])
    lam_y = _target_drift(model, np.tile(x, L), v.ravel()).reshape(-1, L, nx)
    vals = lam_y - lam[:, None, :] * pu - 0.5 * sig[:, None, :] ** 2 * M[None]
    masked = np.where(inside, vals, -np.inf)
    best = np.argmax(masked, axis=0)  # first maximiser, i.e. smallest control
    F = np.take_along_axis(masked, best[None], axis=0)[0]
    empty = ~inside.any(axis=0)
    best = np.where(empty, np.argmin(absN, axis=0), best)
    return F, model.controls[best], empty


@dataclass
class ValueSurface:
    labels: list
    t: np.ndarray
    x: np.ndarray
    values: np.ndarray  # (L, nt+1, nx)
    feedback: np.ndarray  # (L, nt+1, nx)
    kernel_empty: np.ndarray  # (L, nt+1, nx) bool
    children: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {lab: k for k, lab in enumerate(self.labels)}

    def row(self, label) -> int:
        """Row of ``label`` or, outside the tree, of its nearest implemented ancestor."""
        lab = Label(label)
        while lab not in self._index:
            lab = lab.parent()
        return self._index[lab]

    def slice(self, label, n: int = 0) -> np.ndarray:
        return self.values[self.row(label), n]

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.x[0]) & (x <= self.x[-1])

    def _locate(self, grid, v):
        k = np.clip(np.searchsorted(grid, v, side="right") - 1, 0, grid.size - 2)
        w = np.clip((v - grid[k]) / (grid[k + 1] - grid[k]), 0.0, 1.0)
        return k, w

    def value(self, labels, t, x) -> np.ndarray:
        """Bilinear interpolation in ``(t, x)``; ``x`` is clamped to the grid."""
        rows = np.array([self.row(lab) for lab in labels], dtype=np.int64)
        t = np.broadcast_to(np.asarray(t, dtype=float), rows.shape)
        x = np.asarray(x, dtype=float).reshape(rows.shape)
        if self.t.size == 1:
            kt, wt = np.zeros(rows.shape, np.int64), np.zeros(rows.shape)
            tt = lambda k: np.zeros_like(k)  # noqa: E731
        else:
            kt, wt = self._locate(self.t, t)
            tt = lambda k: k + 1  # noqa: E731
        kx, wx = self._locate(self.x, x)
        V = self.values
        v00, v01 = V[rows, kt, kx], V[rows, kt, kx + 1]
        v10, v11 = V[rows, tt(kt), kx], V[rows, tt(kt), kx + 1]
        return (1 - wt) * ((1 - wx) * v00 + wx * v01) + wt * ((1 - wx) * v10 + wx * v11)

    def control_at(self, labels, t, x) -> np.ndarray:
        rows = np.array([self.row(lab) for lab in labels], dtype=np.int64)
        t = np.broadcast_to(np.asarray(t, dtype=float), rows.shape)
        n = np.clip(np.searchsorted(self.t, t + 1e-12, side="right") - 1, 0, self.t.size - 1)
        j = np.clip(np.rint((np.asarray(x, dtype=float).reshape(rows.shape) - self.x[0]) / (self.x[1] - self.x[0])),
                    0, self.x.size - 1).astype(np.int64)
        return self.feedback[rows, n, j]

    def feedback_control(self) -> "SurfaceFeedback":
        return SurfaceFeedback(self)

    def write_csv(self, path) -> None:
        """Rows ``label, t, x, v, feedback_a, kernel_empty``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "t", "x", "v", "feedback_a", "kernel_empty"])
            for r, lab in enumerate(self.labels):
                for n, t in enumerate(self.t):
                    for j, x in enumerate(self.x):
                        w.writerow([str(lab), repr(float(t)), repr(float(x)), repr(float(self.values[r, n, j])),
                                    repr(float(self.feedback[r, n, j])), int(self.kernel_empty[r, n, j])])


class SurfaceFeedback:
    """Feedback read off a surface: time slice at or before ``t``, nearest ``x`` node."""

    name = "pde-feedback"

    def __init__(self, surface: ValueSurface):
        self.surface = surface

    def __call__(self, labels, t, x, y):
        x = np.asarray(x, dtype=float)
        return self.surface.control_at(labels, t, x[:, 0] if x.ndim == 2 else x)


def _feedback_slices(model, values, x, lo, hi, eps):
    coeffs = _coeffs(model, x)
    dx = float(x[1] - x[0])
    L, nt1, nx = values.shape
    fb = np.empty_like(values)
    empty = np.empty(values.shape, dtype=bool)
    for n in range(nt1):
        _, fb[:, n], empty[:, n] = _hamiltonian(model, coeffs, x, values[:, n], dx, lo, hi, eps)
    return fb, empty


def solve_vi(model: CoefficientModel, law: OffspringLaw, target: TargetSpec, grid: GridSpec) -> ValueSurface:
    """Backward explicit solve on ``[0, T]`` over the truncated label tree."""
    T = target.T
    ok, dt_max = cfl_check(model, grid, T)
    if not ok:
        raise CFLError(f"dt={T / grid.nt:.6g} exceeds the stable bound {dt_max:.6g}; "
                       f"use nt >= {math.ceil(T / dt_max)}", dt_max)
    x = grid.x
    dx, dt = grid.dx, T / grid.nt
    k_max = law.k_max
    cap = k_max if grid.offspring_index_cap is None else grid.offspring_index_cap
    tree = _tree(grid.depth, cap, k_max)
    lo, hi = admissible_slopes(model, x)
    eps = auto_epsilon(model) if grid.epsilon is None else float(grid.epsilon)
    coeffs = _coeffs(model, x)

    L = len(tree.labels)
    V = np.empty((L, grid.nt + 1, x.size))
    V[:, -1] = terminal_tree_sup(target, tree.labels, tree.children, x, lo, hi)
    for n in range(grid.nt - 1, -1, -1):
        nxt = V[:, n + 1]
        F, _, empty = _hamiltonian(model, coeffs, x, nxt, dx, lo, hi, eps)
        cur = np.where(empty, nxt, nxt - dt * np.where(empty, 0.0, F))
        cur = facelift(cur, dx, lo, hi)
        _apply_obstacle(cur, tree)
        V[:, n] = cur

    fb, empty = _feedback_slices(model, V, x, lo, hi, eps)
    meta = {
        "dx": dx,
        "dt": dt,
        "dt_max": dt_max,
        "epsilon": eps,
        "slope_lo": lo,
        "slope_hi": hi,
        "k_max": k_max,
        "k_bar_literal": law.k_bar,
        "obstacle_children": min(cap, k_max),
        "depth": grid.depth,
        "offspring_index_cap": cap,
    }
    return ValueSurface(tree.labels, np.linspace(0.0, T, grid.nt + 1), x, V, fb, empty, tree.children, meta)


def extract_feedback(surface: ValueSurface, model: CoefficientModel, eps: float | None = None) -> SurfaceFeedback:
    """Feedback maximising the ``F`` integrand over the kernel, ties to the smallest control.

    Empty-kernel nodes get the control nearest in ``|N^a|`` and are flagged in
    ``surface.kernel_empty``.
    """
    if eps is not None and eps != surface.meta.get("epsilon"):
        fb, empty = _feedback_slices(model, surface.values, surface.x, surface.meta["slope_lo"],
                                     surface.meta["slope_hi"], eps)
        surface = ValueSurface(surface.labels, surface.t, surface.x, surface.values, fb, empty,
                               surface.children, {**surface.meta, "epsilon": eps})
    return surface.feedback_control()


def obstacle_violation(surface: ValueSurface) -> float:
    """Largest ``v_child - v_parent`` over all nodes; ``<= 0`` when the obstacle holds."""
    worst = -math.inf
    for r, kids in enumerate(surface.children):
        for c in kids:
            worst = max(worst, float(np.max(surface.values[c] - surface.values[r])))
    return worst


def facelift_defect(surface: ValueSurface) -> float:
    """Largest change any slice undergoes when face-lifted again."""
    dx = float(surface.x[1] - surface.x[0])
    lifted = facelift(surface.values, dx, surface.meta["slope_lo"], surface.meta["slope_hi"])
    return float(np.max(np.abs(lifted - surface.values)))


def self_convergence(model, law, target, grid: GridSpec, x0: float, levels: int = 3, label=ROOT):
    """Root values at ``x0`` on successively refined grids and the ratio of successive differences.

    The base ``nt`` is raised when needed so that the finest level is
    CFL-stable. Differences at round-off level on both halvings count as
    converged (ratio 0).
    """
    finest = grid
    for _ in range(levels - 1):
        finest = finest.refine()
    ok, dt_max = cfl_check(model, finest, target.T)
    if not ok:
        nt = math.ceil(target.T / dt_max / 2 ** (levels - 1))
        grid = GridSpec(grid.x_lo, grid.x_hi, grid.nx, nt, grid.depth, grid.offspring_index_cap, grid.epsilon)
    vals = []
    g = grid
    for _ in range(levels):
        s = solve_vi(model, law, target, g)
        vals.append(float(s.value([label], 0.0, np.array([x0]))[0]))
        g = g.refine()
    diffs = np.abs(np.diff(vals))
    ratios = []
    for d0, d1 in zip(diffs, diffs[1:]):
        if d0 <= 1e-12 and d1 <= 1e-12:
            ratios.append(0.0)
        else:
            ratios.append(d1 / d0 if d0 > 0 else math.inf)
    return vals, ratios
