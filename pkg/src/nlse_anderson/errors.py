"""Shared exception types."""


class ToolkitError(Exception):
    """Base class for errors raised by this package."""


class DiagonalizationError(ToolkitError):
    """Eigensolver failed to converge; carries solver diagnostics."""


class NumericalFailure(ToolkitError):
    """Overflow/NaN or step-size breakdown during time integration."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class ConfigError(ToolkitError):
    """Experiment configuration is malformed or violates the schema."""


class FitError(ToolkitError):
    """A fit was refused (degenerate window, rank deficiency, no overlap)."""
