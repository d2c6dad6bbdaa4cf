"""Stochastic six vertex model: dynamics, Bethe ansatz kernels, duality and
the microscopic Hopf-Cole transform."""

__version__ = "0.1.0"

from .model_core import ModelParams, walk_pmf, tilted_kernel, limiting_variance  # noqa: E402
from .dynamics import InitialCondition, KeyedDrivers, OccupationWindow, stationary_h  # noqa: E402

__all__ = [
    "ModelParams", "walk_pmf", "tilted_kernel", "limiting_variance",
    "InitialCondition", "KeyedDrivers", "OccupationWindow", "stationary_h",
]
