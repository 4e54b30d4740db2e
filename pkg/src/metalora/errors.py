"""Exception types raised by the metalora package."""


class MetaLoraError(Exception):
    """Base class for all package errors."""


class DimensionError(MetaLoraError, ValueError):
    """Shapes or sizes are inconsistent with the requested operation."""


class TaskIndexError(MetaLoraError, IndexError):
    """A task index lies outside 1..T+1."""


class GenerationError(MetaLoraError, RuntimeError):
    """Random ground-truth generation could not satisfy its invariants."""


class SingularSystemError(MetaLoraError, ArithmeticError):
    """Normal equations are singular (rank-deficient design, no ridge)."""


class PreconditionError(MetaLoraError, ValueError):
    """A numerical precondition failed; carries the offending residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InfeasibleNetError(MetaLoraError, ValueError):
    """A full epsilon-net was requested in too many dimensions."""

    def __init__(self, message, required_points=None):
        super().__init__(message)
        self.required_points = required_points


class ConfigError(MetaLoraError, ValueError):
    """Experiment configuration is invalid."""
