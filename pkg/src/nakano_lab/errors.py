"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: ConfigError -> 2, NumericalError
(and subclasses) -> 3.  Conclusion failures and vacuous runs are report
states, not exceptions.
"""


class NakanoLabError(Exception):
    """Base class for all package errors."""


class ConfigError(NakanoLabError):
    """Invalid configuration: schema violation, unknown keys, bad values."""


class ParseError(NakanoLabError):
    """Expression syntax error; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class DomainEvalError(NakanoLabError):
    """Evaluation outside a function's domain (log/sqrt of nonpositive, etc.)."""


class NumericalError(NakanoLabError):
    """Numerical failure: nonconvergence, positivity violation, solver breakdown."""


class PositivityError(NumericalError):
    """A field that must be Hermitian positive definite failed the check."""


class NonconvergenceError(NumericalError):
    """An iterative or doubling scheme did not reach its tolerance."""


class EmptyGridError(NakanoLabError):
    """Sampling produced no points: degenerate slice or empty domain."""
