"""Event-driven Monte Carlo for controlled branching diffusions with a target process.

Paths are simulated in batches, vectorised over all alive particles of all
paths. Each particle owns a Brownian motion defined on the global Euler grid
by counter-based draws keyed on ``(seed, path_index, label)``; branch times
inside a step are hit exactly through Brownian-bridge interpolation of that
particle's own increment, so children inherit the parent's state at the
branch time without smearing.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .labels import Label
from .model import CoefficientModel, OffspringLaw
from .population import PointMeasure, PopulationEvent, validate


class ExplosionError(RuntimeError):
    """Population of a path exceeded the configured hard cap."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    seed: int = 0
    path_index: int = 0
    record: bool = False
    max_population: int = 10**6

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.seed < 0 or self.path_index < 0:
            raise ValueError("seed and path_index must be non-negative")


# ---------------------------------------------------------------- controls


class ConstantControl:
    def __init__(self, a: float, name: str | None = None):
        self.a = float(a)
        self.name = name or f"const-{self.a:g}"

    def __call__(self, labels, t, x, y):
        return np.full(len(labels), self.a)

    def __repr__(self):
        return f"ConstantControl({self.a!r})"


def riskless() -> ConstantControl:
    return ConstantControl(0.0, name="riskless")


class FeedbackFunction:
    """Label-blind feedback ``a = fn(t, x, y)`` with vector arguments."""

    def __init__(self, fn: Callable, name: str = "feedback"):
        self.fn = fn
        self.name = name

    def __call__(self, labels, t, x, y):
        return np.asarray(self.fn(t, x, y), dtype=float).reshape(len(labels))


# ---------------------------------------------------------------- results


@dataclass
class Snapshot:
    """Flat particle arrays at one time; ``path`` holds batch-local path ids."""

    time: float
    path: np.ndarray
    labels: list
    x: np.ndarray
    y: np.ndarray

    def measures(self, n_paths: int) -> list[PointMeasure]:
        dim = self.x.shape[1] + 1
        order = np.argsort(self.path, kind="stable")
        bounds = np.searchsorted(self.path[order], np.arange(n_paths + 1))
        out = []
        for j in range(n_paths):
            idx = order[bounds[j] : bounds[j + 1]]
            pts = np.column_stack([self.x[idx], self.y[idx]]) if idx.size else np.zeros((0, dim))
            out.append(PointMeasure.from_entries(zip([self.labels[i] for i in idx], pts), dim=dim))
        return out

    def sizes(self, n_paths: int) -> np.ndarray:
        return np.bincount(self.path, minlength=n_paths)


@dataclass
class PopulationPath:
    path_index: int
    t0: float
    T: float
    events: list[PopulationEvent]
    times: np.ndarray
    states: list[PointMeasure]
    terminal_state: PointMeasure
    sup_size: int

    def state_at(self, theta: float) -> PointMeasure:
        k = _time_index(self.times, theta)
        return self.states[k]


@dataclass
class PathBatch:
    t0: float
    T: float
    grid: np.ndarray
    path_indices: np.ndarray
    initial_sizes: np.ndarray
    terminal: Snapshot
    sup_sizes: np.ndarray
    event_path: np.ndarray
    event_time: np.ndarray
    event_parent: list
    event_k: np.ndarray
    snapshots: list[Snapshot] | None = None

    @property
    def n_paths(self) -> int:
        return int(self.path_indices.size)

    @property
    def terminal_sizes(self) -> np.ndarray:
        return self.terminal.sizes(self.n_paths)

    def terminal_measures(self) -> list[PointMeasure]:
        return self.terminal.measures(self.n_paths)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.snapshots]) if self.snapshots else np.zeros(0)

    def state_at(self, theta: float) -> list[PointMeasure]:
        if not self.snapshots:
            raise ValueError("states were not recorded")
        return self.snapshots[_time_index(self.times, theta)].measures(self.n_paths)

    def events_of(self, j: int) -> list[PopulationEvent]:
        idx = np.flatnonzero(self.event_path == j)
        idx = idx[np.argsort(self.event_time[idx], kind="stable")]
        return [PopulationEvent(float(self.event_time[i]), self.event_parent[i], int(self.event_k[i])) for i in idx]

    def path(self, j: int) -> PopulationPath:
        states = [s.measures(self.n_paths)[j] for s in self.snapshots] if self.snapshots else []
        return PopulationPath(
            path_index=int(self.path_indices[j]),
            t0=self.t0,
            T=self.T,
            events=self.events_of(j),
            times=self.times,
            states=states,
            terminal_state=self.terminal.measures(self.n_paths)[j],
            sup_size=int(self.sup_sizes[j]),
        )


def _time_index(times: np.ndarray, theta: float) -> int:
    hits = np.flatnonzero(np.abs(np.asarray(times) - theta) <= 1e-12 * max(1.0, abs(theta)))
    if hits.size == 0:
        raise ValueError(f"time {theta} is not a recorded time")
    return int(hits[0])


# ---------------------------------------------------------------- engine


def time_grid(t0: float, T: float, dt: float) -> np.ndarray:
    if T < t0:
        raise ValueError("start time after horizon")
    n = int(math.ceil((T - t0) / dt - 1e-9)) if T > t0 else 0
    return np.linspace(t0, T, n + 1) if n else np.array([float(T)])


def euler_step(model: CoefficientModel, x, y, a, h, dB):
    """One Euler-Maruyama step of ``(X, Y)`` sharing the increment ``dB``."""
    lam = model.drift(x, a)
    sig = model.diffusion(x, a)
    x_new = x + lam * h[:, None] + (sig * dB[:, None, :]).sum(axis=-1)
    y_new = y + model.target_drift(x, y, a) * h + (model.target_diffusion(x, a) * dB).sum(axis=-1)
    return x_new, y_new


def _lifetimes(keys, gamma: float) -> np.ndarray:
    if gamma <= 0:
        return np.full(keys.shape[0], np.inf)
    return -np.log(rng.uniforms(keys, rng.CLOCK, 0)) / gamma


class _State:
    """Structure-of-arrays particle store."""

    __slots__ = ("pid", "gidx", "labels", "lkey", "skey", "x", "y", "death")

    def __init__(self, pid, gidx, labels, lkey, skey, x, y, death):
        self.pid, self.gidx, self.labels = pid, gidx, labels
        self.lkey, self.skey, self.x, self.y, self.death = lkey, skey, x, y, death

    def __len__(self):
        return self.pid.shape[0]

    def take(self, idx):
        return _State(
            self.pid[idx], self.gidx[idx], [self.labels[i] for i in idx], self.lkey[idx],
            self.skey[idx], self.x[idx], self.y[idx], self.death[idx],
        )

    @staticmethod
    def concat(parts, d):
        parts = [p for p in parts if len(p)]
        if not parts:
            return _State(np.zeros(0, np.int64), np.zeros(0, np.int64), [], np.zeros(0, np.uint64),
                          np.zeros(0, np.uint64), np.zeros((0, d)), np.zeros(0), np.zeros(0))
        labels = []
        for p in parts:
            labels.extend(p.labels)
        return _State(
            np.concatenate([p.pid for p in parts]), np.concatenate([p.gidx for p in parts]), labels,
            np.concatenate([p.lkey for p in parts]), np.concatenate([p.skey for p in parts]),
            np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
            np.concatenate([p.death for p in parts]),
        )


def _run_chunk(t0, initial, model, law, control, cfg, grid, gidx0, pid0):
    d, m = model.dim_x, model.dim_noise
    n_paths = len(initial)
    pid, gidx, labels, pts = [], [], [], []
    for j, mu in enumerate(initial):
        for lab, pt in mu:
            pid.append(pid0 + j)
            gidx.append(gidx0 + j)
            labels.append(lab)
            pts.append(pt)
    pid = np.array(pid, dtype=np.int64)
    gidx = np.array(gidx, dtype=np.int64)
    pts = np.array(pts, dtype=float).reshape(-1, d + 1)
    lkey = np.array([rng.label_key(lab) for lab in labels], dtype=np.uint64)
    skey = rng.derive(cfg.seed, gidx, lkey) if lkey.size else np.zeros(0, np.uint64)
    death = t0 + _lifetimes(skey, law.gamma) if lkey.size else np.zeros(0)
    state = _State(pid, gidx, labels, lkey, skey, pts[:, :d].copy(), pts[:, d].copy(), death)

    counts = np.bincount(pid - pid0, minlength=n_paths).astype(np.int64)
    ev_pid, ev_time, ev_parent, ev_k = [], [], [], []
    snaps = [Snapshot(float(grid[0]), state.pid.copy(), list(state.labels), state.x.copy(), state.y.copy())] if cfg.record else None

    for k in range(grid.size - 1):
        ta, tb = float(grid[k]), float(grid[k + 1])
        h = tb - ta
        wave = state
        n = len(wave)
        S = np.full(n, ta)
        WF = math.sqrt(h) * rng.normals(wave.skey, rng.NOISE, k, m) if n else np.zeros((0, m))
        BS = np.zeros((n, m))
        done = []
        while len(wave):
            E = np.minimum(wave.death, tb)
            dies = wave.death <= tb
            BE = WF.copy()
            if dies.any():
                di = np.flatnonzero(dies)
                span = tb - S[di]
                frac = np.where(span > 0, (E[di] - S[di]) / np.where(span > 0, span, 1.0), 1.0)
                z = rng.normals(wave.skey[di], rng.BRIDGE_DEATH, k, m)
                BE[di] = BS[di] + frac[:, None] * (WF[di] - BS[di]) + np.sqrt(frac * (1 - frac) * span)[:, None] * z
            a = np.asarray(control(wave.labels, S, wave.x, wave.y), dtype=float)
            wave.x, wave.y = euler_step(model, wave.x, wave.y, a, E - S, BE - BS)
            alive = np.flatnonzero(~dies)
            done.append(wave.take(alive))
            if not dies.any():
                break
            par = wave.take(di)
            t_ev = E[di]
            kids = law.sample(rng.uniforms(par.skey, rng.OFFSPRING, 0))
            ev_pid.append(par.pid)
            ev_time.append(t_ev)
            ev_parent.extend(par.labels)
            ev_k.append(kids)
            np.add.at(counts, par.pid - pid0, kids - 1)
            if counts.max(initial=0) > cfg.max_population:
                j = int(np.argmax(counts))
                raise ExplosionError(f"path {gidx0 + j} exceeded {cfg.max_population} particles at t={t_ev.max():.6g}")
            rep = np.repeat(np.arange(len(par)), kids)
            if rep.size == 0:
                break
            digits = np.concatenate([np.arange(q) for q in kids]) if rep.size else np.zeros(0, np.int64)
            c_lkey = rng.child_label_keys(par.lkey[rep], digits)
            c_gidx = par.gidx[rep]
            c_skey = rng.derive(cfg.seed, c_gidx, c_lkey)
            c_S = t_ev[rep]
            c_labels = [par.labels[i].child(int(dg)) for i, dg in zip(rep, digits)]
            wave = _State(par.pid[rep], c_gidx, c_labels, c_lkey, c_skey, par.x[rep].copy(), par.y[rep].copy(),
                          c_S + _lifetimes(c_skey, law.gamma))
            S = c_S
            WF = math.sqrt(h) * rng.normals(c_skey, rng.NOISE, k, m)
            f1 = (S - ta) / h
            BS = f1[:, None] * WF + np.sqrt(f1 * (1 - f1) * h)[:, None] * rng.normals(c_skey, rng.BRIDGE_BIRTH, k, m)
        state = _State.concat(done, d)
        if snaps is not None:
            snaps.append(Snapshot(tb, state.pid.copy(), list(state.labels), state.x.copy(), state.y.copy()))

    events = (
        np.concatenate(ev_pid) if ev_pid else np.zeros(0, np.int64),
        np.concatenate(ev_time) if ev_time else np.zeros(0),
        ev_parent,
        np.concatenate(ev_k) if ev_k else np.zeros(0, np.int64),
    )
    return state, events, snaps


def _canonical(snap: Snapshot) -> Snapshot:
    """Order particles by (path, label) so output does not depend on chunking."""
    order = sorted(range(snap.path.size), key=lambda i: (snap.path[i], snap.labels[i]))
    idx = np.array(order, dtype=np.int64)
    return Snapshot(snap.time, snap.path[idx], [snap.labels[i] for i in order], snap.x[idx], snap.y[idx])


def _sup_sizes(initial_sizes, ev_path, ev_time, ev_k):
    sup = initial_sizes.astype(np.int64).copy()
    if ev_path.size == 0:
        return sup
    order = np.lexsort((ev_time, ev_path))
    p = ev_path[order]
    dk = ev_k[order].astype(np.int64) - 1
    cs = np.cumsum(dk)
    starts = np.r_[0, np.flatnonzero(np.diff(p)) + 1]
    base = np.repeat(cs[starts] - dk[starts], np.diff(np.r_[starts, p.size]))
    running = initial_sizes[p] + cs - base
    np.maximum.at(sup, p, running)
    return sup


def default_threads() -> int:
    env = os.environ.get("BRANCH_TARGET_THREADS")
    if env:
        return max(1, int(env))
    return 1


def simulate_paths(
    t0: float,
    initial: PointMeasure | Sequence[PointMeasure],
    model: CoefficientModel,
    law: OffspringLaw,
    control,
    cfg: SimConfig,
    T: float,
    n_paths: int = 1,
    threads: int | None = None,
) -> PathBatch:
    """Simulate paths ``cfg.path_index, ..., cfg.path_index + n_paths - 1``.

    ``initial`` is one measure over ``(x, y)`` shared by every path, or one
    measure per path. Each path is a deterministic function of
    ``(cfg.seed, path_index)`` whatever the batching or thread count.
    """
    if isinstance(initial, PointMeasure):
        initial = [initial] * n_paths
    else:
        initial = list(initial)
        n_paths = len(initial)
    if not t0 <= T:
        raise ValueError("t0 must not exceed the horizon")
    d = model.dim_x
    for mu in initial:
        if mu.dim != d + 1:
            raise ValueError(f"initial measure must live on R^{d + 1}")
    if initial and not validate(initial[0]):
        raise ValueError("initial measure violates the antichain invariant")
    grid = time_grid(t0, T, cfg.dt)
    threads = threads or default_threads()
    n_chunks = max(1, min(threads, n_paths))
    bounds = np.linspace(0, n_paths, n_chunks + 1).astype(int)

    def work(c):
        lo, hi = bounds[c], bounds[c + 1]
        return _run_chunk(t0, initial[lo:hi], model, law, control, cfg, grid, cfg.path_index + lo, lo)

    if n_chunks == 1:
        results = [work(0)]
    else:
        with ThreadPoolExecutor(max_workers=n_chunks) as pool:
            results = list(pool.map(work, range(n_chunks)))

    states = [r[0] for r in results]
    term = _State.concat(states, d)
    ev_path = np.concatenate([r[1][0] for r in results])
    ev_time = np.concatenate([r[1][1] for r in results])
    ev_parent = [lab for r in results for lab in r[1][2]]
    ev_k = np.concatenate([r[1][3] for r in results])
    init_sizes = np.array([len(mu) for mu in initial], dtype=np.int64)
    snapshots = None
    if cfg.record:
        snapshots = []
        for s in range(grid.size):
            parts = [r[2][s] for r in results]
            labels = [lab for p in parts for lab in p.labels]
            snapshots.append(_canonical(Snapshot(parts[0].time, np.concatenate([p.path for p in parts]), labels,
                                                 np.concatenate([p.x for p in parts]),
                                                 np.concatenate([p.y for p in parts]))))
    eorder = np.lexsort((ev_time, ev_path))
    ev_path, ev_time, ev_k = ev_path[eorder], ev_time[eorder], ev_k[eorder]
    ev_parent = [ev_parent[i] for i in eorder]
    return PathBatch(
        t0=float(t0),
        T=float(T),
        grid=grid,
        path_indices=cfg.path_index + np.arange(n_paths),
        initial_sizes=init_sizes,
        terminal=_canonical(Snapshot(float(T), term.pid, term.labels, term.x, term.y)),
        sup_sizes=_sup_sizes(init_sizes, ev_path, ev_time, ev_k),
        event_path=ev_path,
        event_time=ev_time,
        event_parent=ev_parent,
        event_k=ev_k,
        snapshots=snapshots,
    )


def simulate(t0, initial: PointMeasure, model, law, control, cfg: SimConfig, T: float) -> PopulationPath:
    """Single path with index ``cfg.path_index``."""
    if not validate(initial):
        raise ValueError("initial measure violates the antichain invariant")
    if not t0 < T:
        raise ValueError("t0 must be before the horizon")
    return simulate_paths(t0, initial, model, law, control, cfg, T, n_paths=1, threads=1).path(0)


def restart(path: PopulationPath, theta: float, model, law, control, cfg: SimConfig, T: float) -> PopulationPath:
    """Fresh simulation from ``(theta, state(theta))`` with the randomness of ``cfg``."""
    k = _time_index(path.times, theta)
    mu = path.states[k]
    if abs(theta - T) <= 1e-12 * max(1.0, abs(T)):
        return PopulationPath(path.path_index, float(theta), T, [], np.array([float(T)]), [mu], mu, len(mu))
    return simulate_paths(theta, mu, model, law, control, cfg, T, n_paths=1, threads=1).path(0)


def restart_paths(batch: PathBatch, theta: float, model, law, control, cfg: SimConfig, T: float,
                  threads: int | None = None) -> PathBatch:
    """Restart every path of a recorded batch at ``theta``."""
    return simulate_paths(theta, batch.state_at(theta), model, law, control, cfg, T, threads=threads)


@dataclass(frozen=True)
class GrowthReport:
    mean_sup_size: float
    se: float
    bound: float
    n_paths: int

    @property
    def within_bound(self) -> bool:
        return self.mean_sup_size <= self.bound + 3 * self.se


def population_growth_report(batch: PathBatch, law: OffspringLaw) -> GrowthReport:
    """Compare the mean of ``sup_s |V_s|`` with ``|V| exp(gamma M (T - t0))``."""
    n = batch.n_paths
    if n < 100:
        raise ValueError("growth report needs at least 100 paths")
    sup = batch.sup_sizes.astype(float)
    v0 = float(np.mean(batch.initial_sizes))
    bound = v0 * math.exp(law.gamma * law.mean * (batch.T - batch.t0))
    return GrowthReport(float(sup.mean()), float(sup.std(ddof=1) / math.sqrt(n)), bound, n)
