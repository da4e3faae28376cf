"""Error types and numerical retry logic for the DFRC optimization pipeline."""

from typing import Any, Dict, Optional, Tuple

import numpy as np
import structlog
from scipy import linalg
from tenacity import (
    RetryError,
    Retrying,
    retry_if_exception_type,
    stop_after_attempt,
)

logger = structlog.get_logger(__name__)


class DfrcError(Exception):
    """Base class for every error raised by the pipeline."""

    exit_code = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details


class ConfigError(DfrcError):
    """Raised when a run configuration cannot be loaded or validated."""

    exit_code = 3


class InfeasibleError(DfrcError):
    """Raised when the requested CRB bounds cannot be met."""

    exit_code = 2


class InfeasibleProblemError(InfeasibleError):
    """Phase-I could not find a strictly feasible point.

    Attributes:
        certificate: Optimal Phase-I slack (positive means infeasible).
        point: Phase-I minimizer, useful for diagnosing violated rows.
        violated: Tags of the constraints violated at ``point``.
    """

    def __init__(
        self,
        message: str,
        certificate: float,
        point: Optional[np.ndarray] = None,
        violated: Optional[list] = None,
    ):
        super().__init__(message, certificate=certificate, violated=violated or [])
        self.certificate = certificate
        self.point = point
        self.violated = violated or []


class InfeasibleAllocationError(InfeasibleError):
    """Raised when no subcarrier assignment satisfies the CRB constraints."""


class BracketError(InfeasibleError):
    """Raised when a bisection bracket does not straddle the feasibility boundary."""


class NumericalError(DfrcError):
    """Raised on numerical failure (singular systems, degenerate inputs)."""

    exit_code = 4


class SingularInformationError(NumericalError):
    """Raised when a Fisher information sum cannot be inverted."""

    def __init__(self, message: str, diagnostic: str, condition_number: float = np.inf):
        super().__init__(
            message, diagnostic=diagnostic, condition_number=condition_number
        )
        self.diagnostic = diagnostic
        self.condition_number = condition_number


class DegenerateGeometryError(NumericalError):
    """Raised when two points of a bistatic path coincide."""


class NonConvergenceError(NumericalError):
    """Raised when an iterative solver hits its iteration cap."""


class IndefiniteMatrixError(NumericalError):
    """Raised when a covariance has significantly negative eigenvalues."""


class SamplingError(NumericalError):
    """Raised on undersampled grids, out-of-range windows or vanishing steps."""


class ZeroChannelError(NumericalError):
    """Raised when a beamformer is requested for an all-zero channel."""


class ErrorHandler:
    """Formats pipeline errors and guards fragile factorizations."""

    def __init__(self, max_attempts: int = 5, base_regularization: float = 1e-12):
        self.max_attempts = max_attempts
        self.base_regularization = base_regularization

    def exit_code_for(self, exception: BaseException) -> int:
        """Map an exception onto a process exit code."""
        if isinstance(exception, DfrcError):
            return exception.exit_code
        return 1

    def format_error_response(self, exception: BaseException) -> dict:
        """Format an exception into a structured response."""
        response = {
            "success": False,
            "error": str(exception),
            "error_type": type(exception).__name__,
            "exit_code": self.exit_code_for(exception),
            "details": {},
        }
        if isinstance(exception, DfrcError):
            response["details"] = {
                key: value
                for key, value in exception.details.items()
                if isinstance(value, (str, int, float, bool, list, type(None)))
            }
        return response

    def regularized_cholesky(self, matrix: np.ndarray) -> Tuple[Any, float]:
        """Cholesky-factor a symmetric matrix, escalating diagonal regularization.

        Each retry multiplies the regularization by 100, starting from
        ``base_regularization`` relative to the largest diagonal entry.

        Args:
            matrix: Symmetric positive (semi)definite matrix.

        Returns:
            Tuple of (cho_factor result, regularization actually applied).
        """
        scale = max(1.0, float(np.max(np.abs(np.diag(matrix)))))
        identity = np.eye(matrix.shape[0])
        attempt_reg = {"value": 0.0}

        def _factor(attempt: int) -> Any:
            reg = self.base_regularization * scale * 100.0 ** (attempt - 1)
            attempt_reg["value"] = reg
            return linalg.cho_factor(matrix + reg * identity, lower=True)

        try:
            for attempt in Retrying(
                retry=retry_if_exception_type(linalg.LinAlgError),
                stop=stop_after_attempt(self.max_attempts),
                reraise=False,
            ):
                with attempt:
                    number = attempt.retry_state.attempt_number
                    if number > 1:
                        logger.warning(
                            "Cholesky failed, escalating regularization",
                            attempt=number,
                        )
                    factor = _factor(number)
        except RetryError as e:
            logger.error("Cholesky failed after regularization", attempts=self.max_attempts)
            raise NumericalError(
                "Newton system is not positive definite",
                attempts=self.max_attempts,
            ) from e

        return factor, attempt_reg["value"]
