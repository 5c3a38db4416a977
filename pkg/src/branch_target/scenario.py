"""JSON scenario files.

Two kinds are understood. ``fintech`` describes the log-price / log-wealth
fork model with per-label strikes; ``custom`` gives scalar
state-independent coefficients per control point and a simple payoff.

Example::

    {"kind": "fintech", "b": 0.1, "c": 0.2, "r": 0.02, "kappa": 0.1, "T": 1.0,
     "strike0": 1.0, "gamma": 0.5, "offspring": [[2, 1.0]],
     "initial": [{"label": "root", "x": [0.0]}],
     "grid": {"x_lo": -6, "x_hi": 2, "nx": 201, "depth": 3}}
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hjb import GridSpec
from .labels import Label
from .model import (CoefficientModel, FintechScenario, OffspringLaw, TargetSpec, fintech_scenario,
                    tabulated_model)
from .population import PointMeasure, validate


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario input."""


@dataclass(frozen=True)
class SimDefaults:
    dt: float = 0.01
    seed: int = 0
    paths: int = 1000


@dataclass(eq=False)
class Scenario:
    name: str
    model: CoefficientModel
    law: OffspringLaw
    target: TargetSpec
    initial: PointMeasure
    t0: float = 0.0
    grid: GridSpec | None = None
    sim: SimDefaults = field(default_factory=SimDefaults)
    fintech: FintechScenario | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def digest(self) -> str:
        return scenario_digest(self.raw)

    def grid_or_default(self) -> GridSpec:
        return self.grid or GridSpec(-6.0, 2.0, 201, 1, depth=1)


def scenario_digest(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _num(d: dict, key: str, default=None, required=False) -> float:
    if key not in d or d[key] is None:
        if required:
            raise ScenarioError(f"missing field {key!r}")
        return default
    try:
        v = float(d[key])
    except (TypeError, ValueError):
        raise ScenarioError(f"field {key!r} must be a number") from None
    if not math.isfinite(v):
        raise ScenarioError(f"field {key!r} must be finite")
    return v


def _law(d: dict) -> OffspringLaw:
    """``gamma`` plus ``offspring`` as ``[[k, p_k], ...]`` (or a ``{"k": p_k}`` map)."""
    off = d.get("offspring")
    if off is None:
        raise ScenarioError("missing 'offspring' law")
    gamma = _num(d, "gamma", required=True)
    try:
        if isinstance(off, dict):
            pairs = tuple((int(k), float(p)) for k, p in off.items())
        else:
            pairs = tuple((int(k), float(p)) for k, p in off)
    except (TypeError, ValueError):
        raise ScenarioError("offspring must list [k, p_k] pairs") from None
    if not pairs:
        raise ScenarioError("offspring law is empty")
    try:
        return OffspringLaw(gamma, pairs)
    except ValueError as err:
        raise ScenarioError(f"offspring law: {err}") from None


def _initial(d: dict, dim: int) -> PointMeasure:
    init = d.get("initial", [{"label": "root", "x": [0.0] * dim}])
    try:
        entries = [(Label.parse(e["label"]) if isinstance(e["label"], str) else Label(e["label"]),
                    [float(v) for v in np.atleast_1d(e["x"])]) for e in init]
    except (KeyError, TypeError, ValueError) as err:
        raise ScenarioError(f"bad initial population: {err}") from None
    mu = PointMeasure.from_entries(entries, dim=dim)
    if not validate(mu):
        raise ScenarioError("initial population must be an antichain of finite points in R^d")
    return mu


def _grid(d: dict) -> GridSpec | None:
    g = d.get("grid")
    if g is None:
        return None
    try:
        return GridSpec(
            x_lo=float(g["x_lo"]),
            x_hi=float(g["x_hi"]),
            nx=int(g.get("nx", 201)),
            nt=int(g.get("nt") or 1),
            depth=int(g.get("depth", 1)),
            offspring_index_cap=None if g.get("offspring_index_cap") is None else int(g["offspring_index_cap"]),
            epsilon=None if g.get("epsilon") is None else float(g["epsilon"]),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise ScenarioError(f"bad grid block: {err}") from None


def _sim(d: dict) -> SimDefaults:
    s = d.get("sim", {})
    try:
        return SimDefaults(dt=float(s.get("dt", 0.01)), seed=int(s.get("seed", 0)), paths=int(s.get("paths", 1000)))
    except (TypeError, ValueError) as err:
        raise ScenarioError(f"bad sim block: {err}") from None


def _tabulated_payoff(spec: dict, T: float) -> TargetSpec:
    kind = spec.get("type", "constant")
    if kind == "constant":
        c = _num(spec, "value", 0.0)
        return TargetSpec(T, lambda labels, x: np.full(len(labels), c), name="constant")
    if kind == "affine":
        s, c = _num(spec, "slope", 0.0), _num(spec, "intercept", 0.0)
        return TargetSpec(T, lambda labels, x: s * np.asarray(x, dtype=float).reshape(len(labels), -1)[:, 0] + c,
                          name="affine")
    raise ScenarioError(f"unknown payoff type {kind!r}")


def scenario_from_dict(d: dict, name: str = "scenario") -> Scenario:
    if not isinstance(d, dict):
        raise ScenarioError("scenario must be a JSON object")
    kind = d.get("kind", "fintech")
    T = _num(d, "T", 1.0)
    t0 = _num(d, "t0", 0.0)
    if not 0 <= t0 < T:
        raise ScenarioError("need 0 <= t0 < T")
    law = _law(d)
    if kind == "fintech":
        strikes = d.get("strikes") or {}
        try:
            fin = fintech_scenario(
                b=_num(d, "b", required=True),
                c=_num(d, "c", required=True),
                r=_num(d, "r", required=True),
                kappa=_num(d, "kappa", required=True),
                T=T,
                strike0=_num(d, "strike0", 1.0),
                strikes={Label.parse(k): float(v) for k, v in strikes.items()},
                strike_bound=_num(d, "strike_bound"),
                zero_index_bound=None if d.get("zero_index_bound") is None else int(d["zero_index_bound"]),
                n_controls=int(d.get("n_controls", 101)),
                option=d.get("option", "put"),
            )
        except (TypeError, ValueError) as err:
            raise ScenarioError(str(err)) from None
        model, target = fin.model, fin.target
    elif kind in ("custom", "tabulated"):
        fin = None
        try:
            model = tabulated_model(d["controls"], d["drift"], d["diffusion"], d["target_drift"],
                                    d["target_diffusion"], d.get("target_drift_y", 0.0))
        except (KeyError, TypeError, ValueError) as err:
            raise ScenarioError(f"bad tabulated coefficients: {err}") from None
        target = _tabulated_payoff(d.get("payoff", {}), T)
    else:
        raise ScenarioError(f"unknown scenario kind {kind!r}")
    return Scenario(
        name=str(d.get("name", name)),
        model=model,
        law=law,
        target=target,
        initial=_initial(d, model.dim_x),
        t0=t0,
        grid=_grid(d),
        sim=_sim(d),
        fintech=fin,
        raw=d,
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ScenarioError(f"cannot read {path}: {err.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as err:
        raise ScenarioError(f"{path}: invalid JSON ({err.msg} at line {err.lineno})") from None
    return scenario_from_dict(d, name=path.stem)


DESK = {
    "name": "desk",
    "kind": "fintech",
    "b": 0.1,
    "c": 0.2,
    "r": 0.02,
    "kappa": 0.1,
    "T": 1.0,
    "strike0": 1.0,
    "option": "put",
    "gamma": 0.5,
    "offspring": [[2, 1.0]],
    "initial": [{"label": "root", "x": [0.0]}],
    "grid": {"x_lo": -6.0, "x_hi": 2.0, "nx": 201, "depth": 3},
    "sim": {"dt": 0.01, "seed": 0, "paths": 1000},
}


def desk_scenario(**overrides) -> Scenario:
    """Reference fork-put case: b=0.1, r=0.02, c=0.2, kappa=0.1, K0=1, T=1, x0=log 1."""
    d = json.loads(json.dumps(DESK))
    d.update(overrides)
    return scenario_from_dict(d, name="desk")
