"""Exception types shared across the package."""


class FunalignError(Exception):
    """Base class for all package errors."""


class DimensionError(FunalignError, ValueError):
    """Tensor arguments have incompatible shapes."""


class ValidationError(FunalignError, ValueError):
    """Input violates a documented precondition or invariant."""


class ContractViolationError(FunalignError, RuntimeError):
    """An internal contract broke, e.g. a fully masked attention row."""


class ParseError(FunalignError, ValueError):
    """Malformed input stream. ``position`` is a byte or token offset."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (position {position})"
        super().__init__(message)
        self.position = position


class ConfigError(FunalignError, ValueError):
    """Inconsistent or unusable configuration."""


class TaskSetupError(FunalignError, ValueError):
    """A task's data requirements are not met."""


class TrainingError(FunalignError, RuntimeError):
    """Training cannot continue, e.g. a non-finite gradient."""
