"""Exception hierarchy for the constrained-inference engine.

Every error carries an exit code (used by the CLI) and an optional ``detail``
mapping that ends up verbatim in the structured error report.
"""

from typing import Any, Dict, Optional


class ConeInferError(Exception):
    """Base class for all engine errors."""

    exit_code: int = 1

    def __init__(self, message: str, detail: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.detail: Dict[str, Any] = dict(detail or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": type(self).__name__,
            "message": self.message,
            "module": self.detail.get("module", type(self).__module__),
            "exit_code": self.exit_code,
            "detail": {key: value for key, value in self.detail.items() if key != "module"},
        }


# Categories
class ConfigurationError(ConeInferError):
    exit_code = 2


class DataError(ConeInferError):
    exit_code = 3


class NumericError(ConeInferError):
    exit_code = 4


# Configuration
class ConfigError(ConfigurationError):
    """Invalid or unknown configuration keys."""

    def __init__(self, message: str, unknown_keys: Optional[list[str]] = None, detail: Optional[Dict[str, Any]] = None):
        merged = dict(detail or {})
        if unknown_keys:
            merged["unknown_keys"] = sorted(unknown_keys)
        super().__init__(message, merged)
        self.unknown_keys = sorted(unknown_keys or [])


# Data ingestion
class BalanceError(DataError):
    """A subject does not have the common number of observations."""


class ParseError(DataError):
    """A cell could not be read as a number."""


class DuplicateError(DataError):
    """The same (subject, time) key appears twice."""


# Numerics
class DimensionError(NumericError):
    """Shapes or counts are inconsistent with the operation."""


class CovarianceError(NumericError):
    """Requested correlation matrix is not positive definite."""


class VarianceError(NumericError):
    """A marginal variance is zero, negative or not finite."""


class ConvergenceError(NumericError):
    """The solver hit its iteration cap. Carries the best iterate."""

    def __init__(
        self,
        message: str,
        best_gamma: Optional[list[float]] = None,
        best_value: Optional[float] = None,
        iterations: int = 0,
    ):
        super().__init__(
            message,
            {"best_gamma": best_gamma, "best_value": best_value, "iterations": iterations},
        )
        self.best_gamma = best_gamma
        self.best_value = best_value
        self.iterations = iterations


class ConstraintError(NumericError):
    """Constraint set is infeasible or a point violates it."""


class MatrixError(NumericError):
    """Matrix is not symmetric positive definite (or diagonal where required)."""


class ProjectionError(NumericError):
    """Cone projection did not terminate."""


class QuadratureError(NumericError):
    """Quadrature refinement changed a constant by more than the tolerance."""


class NonConvexManifoldError(NumericError):
    """Tube coefficients are negative: critical radius below pi/2."""


class DomainError(NumericError):
    """Argument outside the mathematical domain of the function."""


class WeightError(NumericError):
    """Chi-bar weights are not a probability vector."""


def with_provenance(error: ConeInferError, module: str) -> ConeInferError:
    """Tag an error with the module it surfaced from, keeping the innermost tag."""
    error.detail.setdefault("module", module)
    return error


class ReportError(ConeInferError):
    """A report does not conform to the published schema."""
