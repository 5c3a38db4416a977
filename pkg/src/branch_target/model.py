"""Coefficient models, offspring laws, payoff families and the crypto-fork example.

All coefficient callables are vectorised over particles:

* ``drift(x, a)``            -> ``(n, d)``
* ``diffusion(x, a)``        -> ``(n, d, m)``
* ``target_drift(x, y, a)``  -> ``(n,)``
* ``target_diffusion(x, a)`` -> ``(n, m)``

with ``x`` of shape ``(n, d)``, ``y`` and ``a`` of shape ``(n,)``. Controls are
scalars drawn from a finite, sorted grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .labels import Label, digit_sum


@dataclass(frozen=True)
class CoefficientModel:
    dim_x: int
    dim_noise: int
    controls: np.ndarray
    drift: Callable
    diffusion: Callable
    target_drift: Callable
    target_diffusion: Callable
    lipschitz: float = 1.0
    control_holder_exponent: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        ctrl = np.asarray(self.controls, dtype=float).ravel()
        if ctrl.size == 0:
            raise ValueError("control grid is empty")
        if np.any(np.diff(ctrl) <= 0):
            raise ValueError("control grid must be strictly increasing")
        object.__setattr__(self, "controls", ctrl)

    @property
    def control_step(self) -> float:
        return float(np.min(np.diff(self.controls))) if self.controls.size > 1 else 0.0

    def mismatch(self, x: np.ndarray, p: np.ndarray, a: np.ndarray) -> np.ndarray:
        """``N^a(x, p) = sigma_Y(x, a) - sigma(x, a)^T p``, shape ``(n, m)``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim_x)
        p = np.asarray(p, dtype=float).reshape(-1, self.dim_x)
        a = np.asarray(a, dtype=float).ravel()
        sig = self.diffusion(x, a)
        return self.target_diffusion(x, a) - np.einsum("ndm,nd->nm", sig, p)

    def check_finite(self, box: float = 5.0, n: int = 50) -> bool:
        xs = np.linspace(-box, box, n)
        X = np.repeat(xs, self.controls.size).reshape(-1, 1) * np.ones((1, self.dim_x))
        A = np.tile(self.controls, n)
        Y = np.repeat(xs, self.controls.size)
        vals = [self.drift(X, A), self.diffusion(X, A), self.target_drift(X, Y, A), self.target_diffusion(X, A)]
        return all(np.all(np.isfinite(v)) for v in vals)

    def check_lipschitz(self, rng: np.random.Generator, n_pairs: int = 1000, box: float = 5.0) -> bool:
        """Spot check ``|f(x,y,a) - f(x',y',a)| <= L(|x-x'| + |y-y'|)`` on random pairs."""
        d = self.dim_x
        x1 = rng.uniform(-box, box, (n_pairs, d))
        x2 = rng.uniform(-box, box, (n_pairs, d))
        y1 = rng.uniform(-box, box, n_pairs)
        y2 = rng.uniform(-box, box, n_pairs)
        a = rng.choice(self.controls, n_pairs)
        dist = np.linalg.norm(x1 - x2, axis=1) + np.abs(y1 - y2)
        gaps = (
            np.linalg.norm(self.drift(x1, a) - self.drift(x2, a), axis=1)
            + np.linalg.norm((self.diffusion(x1, a) - self.diffusion(x2, a)).reshape(n_pairs, -1), axis=1)
            + np.abs(self.target_drift(x1, y1, a) - self.target_drift(x2, y2, a))
            + np.linalg.norm(self.target_diffusion(x1, a) - self.target_diffusion(x2, a), axis=1)
        )
        return bool(np.all(gaps <= self.lipschitz * dist + 1e-12))


@dataclass(frozen=True)
class OffspringLaw:
    """Branching at rate ``gamma``; ``probs`` lists ``(k, p_k)`` pairs."""

    gamma: float
    probs: tuple[tuple[int, float], ...]

    def __post_init__(self):
        probs = tuple(sorted((int(k), float(p)) for k, p in self.probs))
        object.__setattr__(self, "probs", probs)
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"branching rate must be >= 0, got {self.gamma}")
        if not probs:
            raise ValueError("offspring law is empty")
        ks = [k for k, _ in probs]
        if len(set(ks)) != len(ks) or min(ks) < 0:
            raise ValueError("offspring counts must be distinct and >= 0")
        if any(p < 0 for _, p in probs):
            raise ValueError("offspring probabilities must be >= 0")
        if abs(sum(p for _, p in probs) - 1.0) > 1e-12:
            raise ValueError("offspring probabilities must sum to 1")

    @property
    def mean(self) -> float:
        return float(sum(k * p for k, p in self.probs))

    @property
    def k_max(self) -> int:
        return max(k for k, p in self.probs if p > 0)

    @property
    def k_bar(self) -> int:
        # the literal constant sup{k+1 : p_k > 0} from the HJB obstacle term
        return self.k_max + 1

    def sample(self, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF draw of offspring counts from uniforms in (0, 1)."""
        ks = np.array([k for k, _ in self.probs], dtype=np.int64)
        cdf = np.cumsum([p for _, p in self.probs])
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, u, side="right")
        return ks[np.minimum(idx, ks.size - 1)]


def offspring_stats(law: OffspringLaw) -> tuple[float, int, int]:
    """``(M, K_max, K_bar)`` with ``K_bar = K_max + 1``."""
    return law.mean, law.k_max, law.k_bar


@dataclass(frozen=True)
class TargetSpec:
    """Horizon ``T`` and payoff family ``g``.

    ``payoff(labels, x)`` is vectorised over particles with mixed labels and
    returns shape ``(n,)``; ``x`` has shape ``(n, d)``.
    """

    T: float
    payoff: Callable[[Sequence[Label], np.ndarray], np.ndarray]
    name: str = "target"

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon must be positive")

    def g(self, label: Label, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        x2 = x.reshape(-1, 1) if x.ndim <= 1 else x
        return self.payoff([Label(label)] * x2.shape[0], x2)

    @classmethod
    def per_label(cls, T: float, fn: Callable[[Label, np.ndarray], np.ndarray], name: str = "target") -> "TargetSpec":
        """Build from ``fn(label, x)``, evaluated once per distinct label."""

        def payoff(labels, x):
            out = np.empty(len(labels))
            groups: dict[Label, list[int]] = {}
            for k, lab in enumerate(labels):
                groups.setdefault(lab, []).append(k)
            for lab, idx in groups.items():
                out[idx] = fn(lab, x[idx])
            return out

        return cls(T, payoff, name)


@dataclass(frozen=True, eq=False)
class FintechScenario:
    """Log-price / log-wealth model for options on an asset that may fork."""

    b: float
    c: float
    r: float
    kappa: float
    T: float
    strike0: float = 1.0
    strikes: Mapping[Label, float] = field(default_factory=dict)
    strike_bound: float | None = None
    zero_index_bound: int | None = None
    n_controls: int = 101
    option: str = "put"
    model: CoefficientModel = field(init=False, repr=False, compare=False)
    target: TargetSpec = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("volatility c must be positive")
        if not self.kappa > 0:
            raise ValueError("friction kappa must be positive")
        if self.r < 0:
            raise ValueError("interest rate r must be >= 0")
        if self.strike0 < 0 or any(k < 0 for k in self.strikes.values()):
            raise ValueError("strikes must be >= 0")
        if self.zero_index_bound is not None and self.zero_index_bound < 0:
            raise ValueError("zero_index_bound must be >= 0")
        if self.option not in ("put", "call"):
            raise ValueError(f"unknown option type {self.option!r}")
        if self.n_controls < 2:
            raise ValueError("need at least two controls")
        object.__setattr__(self, "strikes", {Label(k): float(v) for k, v in self.strikes.items()})
        object.__setattr__(self, "_strike_cache", {})
        object.__setattr__(self, "model", self._build_model())
        object.__setattr__(self, "target", TargetSpec(self.T, self._payoff, name=f"fintech-{self.option}"))

    def _build_model(self) -> CoefficientModel:
        b, c, r = self.b, self.c, self.r
        mu_x = b - 0.5 * c * c

        def drift(x, a):
            return np.full((np.shape(x)[0], 1), mu_x)

        def diffusion(x, a):
            return np.full((np.shape(x)[0], 1, 1), c)

        def target_drift(x, y, a):
            a = np.asarray(a, dtype=float)
            return (b - r) * a - 0.5 * c * c * a * a + r

        def target_diffusion(x, a):
            return (c * np.asarray(a, dtype=float)).reshape(-1, 1)

        return CoefficientModel(
            dim_x=1,
            dim_noise=1,
            controls=np.linspace(0.0, 1.0, self.n_controls),
            drift=drift,
            diffusion=diffusion,
            target_drift=target_drift,
            target_diffusion=target_diffusion,
            lipschitz=1.0,
            control_holder_exponent=1.0,
            name="fintech",
        )

    def strike(self, label: Label) -> float:
        label = Label(label)
        cache = self._strike_cache
        if label not in cache:
            if label in self.strikes:
                cache[label] = self.strikes[label]
            else:
                cache[label] = self.strike0 * 2.0 ** (-digit_sum(label))
        return cache[label]

    @property
    def strike_sup(self) -> float:
        if self.strike_bound is not None:
            return float(self.strike_bound)
        return max([self.strike0, *self.strikes.values()])

    def strikes_bounded(self) -> bool:
        """Every tabulated strike and the default family respect the declared bound."""
        bound = self.strike_sup
        return self.strike0 <= bound and all(k <= bound for k in self.strikes.values())

    def is_zero_payoff(self, label: Label) -> bool:
        return self.zero_index_bound is not None and any(d >= self.zero_index_bound for d in label)

    def _payoff(self, labels, x):
        x = np.asarray(x, dtype=float).reshape(len(labels), -1)[:, 0]
        K = np.array([self.strike(lab) for lab in labels])
        S = np.exp(x)
        intrinsic = np.maximum(K - S, 0.0) if self.option == "put" else np.maximum(S - K, 0.0)
        out = np.log(intrinsic + self.kappa)
        if self.zero_index_bound is not None:
            out[[self.is_zero_payoff(lab) for lab in labels]] = 0.0
        return out

    def upper_bound(self, t: float) -> float:
        """Value attained by the riskless strategy, an upper bound on v."""
        return -self.r * (self.T - t) + math.log(self.strike_sup + self.kappa)

    def lower_bound(self, t: float) -> float:
        growth = ((self.b - self.r) / self.c) ** 2 + self.r
        return -growth * (self.T - t) + math.log(self.kappa)

    def best_growth_control(self) -> float:
        """Maximiser of the target drift over [0, 1]."""
        return float(np.clip((self.b - self.r) / self.c**2, 0.0, 1.0))


def fintech_scenario(
    b: float,
    c: float,
    r: float,
    kappa: float,
    T: float = 1.0,
    strike0: float = 1.0,
    strikes: Mapping | None = None,
    strike_bound: float | None = None,
    zero_index_bound: int | None = None,
    n_controls: int = 101,
    option: str = "put",
) -> FintechScenario:
    return FintechScenario(
        b=b,
        c=c,
        r=r,
        kappa=kappa,
        T=T,
        strike0=strike0,
        strikes=dict(strikes or {}),
        strike_bound=strike_bound,
        zero_index_bound=zero_index_bound,
        n_controls=n_controls,
        option=option,
    )


def tabulated_model(
    controls: Sequence[float],
    drift: Sequence[float],
    diffusion: Sequence[float],
    target_drift: Sequence[float],
    target_diffusion: Sequence[float],
    target_drift_y: float = 0.0,
    lipschitz: float | None = None,
) -> CoefficientModel:
    """Scalar state-independent coefficients tabulated per control point.

    Between grid controls the tables are linearly interpolated. ``target_drift``
    gains a linear term ``target_drift_y * y``.
    """
    ctrl = np.asarray(controls, dtype=float)
    tabs = [np.asarray(v, dtype=float) for v in (drift, diffusion, target_drift, target_diffusion)]
    if any(t.shape != ctrl.shape for t in tabs):
        raise ValueError("each coefficient table needs one entry per control")
    lam, sig, lam_y, sig_y = tabs
    ky = float(target_drift_y)

    def look(tab, a):
        return np.interp(np.asarray(a, dtype=float), ctrl, tab)

    return CoefficientModel(
        dim_x=1,
        dim_noise=1,
        controls=ctrl,
        drift=lambda x, a: look(lam, a).reshape(-1, 1),
        diffusion=lambda x, a: look(sig, a).reshape(-1, 1, 1),
        target_drift=lambda x, y, a: look(lam_y, a) + ky * np.asarray(y, dtype=float),
        target_diffusion=lambda x, a: look(sig_y, a).reshape(-1, 1),
        lipschitz=abs(ky) if lipschitz is None else lipschitz,
        name="tabulated",
    )
