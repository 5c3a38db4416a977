"""Branching diffusions with stochastic target constraints: Monte Carlo and HJB solver."""

__version__ = "0.1.0"

from .labels import ROOT, Label  # noqa: E402
from .population import PointMeasure, branch, validate  # noqa: E402
from .model import CoefficientModel, FintechScenario, OffspringLaw, TargetSpec, fintech_scenario  # noqa: E402
from .simulate import SimConfig, simulate, simulate_paths  # noqa: E402
from .hjb import GridSpec, ValueSurface, solve_vi  # noqa: E402

__all__ = [
    "ROOT", "Label", "PointMeasure", "branch", "validate", "CoefficientModel", "FintechScenario",
    "OffspringLaw", "TargetSpec", "fintech_scenario", "SimConfig", "simulate", "simulate_paths",
    "GridSpec", "ValueSurface", "solve_vi",
]
