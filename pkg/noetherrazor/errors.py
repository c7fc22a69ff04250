"""This module contains the exceptions raised by noetherrazor."""

from typing import Any, Dict, Optional, Sequence


class NoetherRazorError(Exception):
    """Base class of every error raised by this package."""


class ShapeError(NoetherRazorError, ValueError):
    """Raised when array or node shapes are incompatible."""


class DomainError(NoetherRazorError, ValueError):
    """Raised when an input lies outside the domain of an operation."""


class PreconditionError(NoetherRazorError, ValueError):
    """Raised when a count, range or other precondition is violated."""


class ConfigError(PreconditionError):
    """Raised for unknown or invalid configuration entries."""


class NumericalError(NoetherRazorError, RuntimeError):
    """Raised when a numerical routine fails."""


class DivergenceError(NumericalError):
    """Raised when an integration produces a non-finite state.

    Parameters
    ----------
    message :
        Human readable description.

    step :
        Index of the step at which the state stopped being finite.

    rows :
        Optional indices of the batch rows that diverged.
    """

    def __init__(
        self, message: str, step: int, rows: Optional[Sequence[int]] = None
    ) -> None:
        """Initialize the divergence error."""
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.rows = list(rows) if rows is not None else []


class TrainingAborted(NumericalError):
    """Raised when training cannot continue.

    ``checkpoint`` holds the last parameters that were entirely finite.
    """

    def __init__(
        self,
        message: str,
        diagnostics: Optional[Dict[str, Any]] = None,
        checkpoint: Any = None,
    ) -> None:
        """Initialize the abort error."""
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.checkpoint = checkpoint
