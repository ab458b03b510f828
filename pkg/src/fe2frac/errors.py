"""Exception types shared across the solver layers."""
from __future__ import annotations


class Fe2FracError(Exception):
    """Base class for errors raised by this package."""


class NonPhysicalStateError(Fe2FracError):
    """A deformation state with non-positive Jacobian was encountered."""


class ConfigError(Fe2FracError):
    """Invalid run configuration.

    The message carries the dotted path of the offending entry, e.g.
    ``rve.inclusion_radius: must be positive``.
    """


class IrreversibilityError(Fe2FracError):
    """A phase field decreased where only growth is admissible."""


class ConvergenceError(Fe2FracError):
    """A Newton loop failed to converge within its iteration budget."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SingularSystemError(Fe2FracError):
    """A constrained linear system was singular or numerically unusable."""
