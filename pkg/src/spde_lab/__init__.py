"""Numerical laboratory for the stochastic heat equation on ``[0, 1]`` with
bounded measurable drift, Neumann boundary and space-time white noise."""

__version__ = "0.1.0"

from .errors import (ConfigError, DomainError, GridMismatchError, InfiniteVarianceError,
                     QuadratureError, SeriesCertificateError)
from .noise_field import Direction, NoiseRealization, SpaceTimeGrid, sample_noise
from .spde_solver import DriftSpec, SolutionField, solve

__all__ = [
    "ConfigError", "Direction", "DomainError", "DriftSpec", "GridMismatchError",
    "InfiniteVarianceError", "NoiseRealization", "QuadratureError", "SeriesCertificateError",
    "SolutionField", "SpaceTimeGrid", "sample_noise", "solve", "__version__",
]
