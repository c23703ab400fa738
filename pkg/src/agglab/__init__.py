"""Numerical laboratory for surrogate-risk consistency under label aggregation."""

from . import aggregate, calibration, core, experiments, optimize, scenarios, surrogate

__all__ = [
    "aggregate",
    "calibration",
    "core",
    "experiments",
    "optimize",
    "scenarios",
    "surrogate",
]

__version__ = "0.1.0"
