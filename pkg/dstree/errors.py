"""Exceptions raised by the Dynamical Systems Tree library."""

from __future__ import annotations


class DstError(Exception):
    """Base class for all library errors."""


class DocumentError(DstError):
    """A model, topology or data document is invalid."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class ShapeError(DstError):
    """Arrays do not match the shapes the model expects."""


class InitializationError(DstError):
    """Data is unsuitable for data-driven parameter initialization."""


class OracleLimitError(DstError):
    """An exact computation would exceed its configured limits."""


class StaleStatisticsError(DstError):
    """Chain statistics are not consistent with the chain parameters."""


class UsageError(DstError):
    """Command line usage problem."""


class NumericalError(DstError):
    """Base class for numerical failures."""


class DeadChainError(NumericalError):
    """A discrete chain lost all of its probability mass."""


class PrecisionError(NumericalError):
    """An assembled precision matrix is not positive definite."""


class CovarianceError(NumericalError):
    """A covariance matrix is not positive definite."""


class SingularRegressionError(NumericalError):
    """A regression normal matrix can not be inverted."""


class MonotonicityError(NumericalError):
    """A coordinate ascent step decreased the bound."""
