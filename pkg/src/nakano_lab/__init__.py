"""Numerical laboratory for curvature positivity of fiber-integrated Hermitian metrics.

The package computes curvature of Hermitian metrics on trivial bundles,
integrates metrics over fibers to form direct-image metrics, and certifies
or refutes Nakano semi-positivity on sample grids.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DomainEvalError,
    EmptyGridError,
    NakanoLabError,
    NonconvergenceError,
    NumericalError,
    ParseError,
    PositivityError,
)

__all__ = [
    "ConfigError",
    "DomainEvalError",
    "EmptyGridError",
    "NakanoLabError",
    "NonconvergenceError",
    "NumericalError",
    "ParseError",
    "PositivityError",
    "__version__",
]
