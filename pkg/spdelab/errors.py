from __future__ import annotations

import datetime
from typing import TYPE_CHECKING, Any, List, Optional

if TYPE_CHECKING:
    from spdelab.rate_fn import RateResult

__all__ = (
    "BaseError",
    "InvalidArgumentError",
    "GridMismatchError",
    "DivergenceError",
    "NonConvergenceError",
    "ConfigurationError",
    "ReportError",
)


class BaseError(RuntimeError):
    """The base class for all errors in the spdelab package."""

    def __init__(
        self,
        message: str = '',
        reason: Optional[str] = None,
        *args: Any,
    ) -> None:
        super().__init__(message, *args)
        self._reason = reason
        self._created_at = datetime.datetime.now()

    @property
    def reason(self) -> Optional[str]:
        """A supplemental reason explaining why the error occurred."""
        return self._reason

    @property
    def created_at(self) -> datetime.datetime:
        """The date and time when the error occurred."""
        return self._created_at


class InvalidArgumentError(BaseError, ValueError):
    """An operation was called with an argument outside of its domain."""


class GridMismatchError(InvalidArgumentError):
    """Two operands are bound to different space-time grids."""


class DivergenceError(BaseError):
    """A solver produced a non-finite state.

    The step index and the lattice time of the first non-finite level are
    retained so that studies can report where a replica blew up.
    """

    def __init__(self, message: str = '', reason: Optional[str] = None, *args: Any, step: int, time: float) -> None:
        super().__init__(message, reason, *args)
        self.step = step
        self.time = time


class NonConvergenceError(BaseError):
    """The least-norm control iteration exhausted its budget above tolerance.

    A target outside the numerical range of the skeleton map ends here: the
    rate of such a target is infinite. The best iterate is kept on the error.
    """

    def __init__(
        self,
        message: str = '',
        reason: Optional[str] = None,
        *args: Any,
        best: Optional[RateResult] = None,
        residual_history: Optional[List[float]] = None,
    ) -> None:
        super().__init__(message, reason, *args)
        self.best = best
        self.residual_history = residual_history or []


class ConfigurationError(BaseError, ValueError):
    """A configuration file is missing a field or holds an invalid value."""

    def __init__(self, message: str = '', reason: Optional[str] = None, *args: Any, field: Optional[str] = None) -> None:
        super().__init__(message, reason, *args)
        self.field = field


class ReportError(BaseError):
    """Reports could not be written to the requested directory."""
