"""Exception types shared across the package."""


class IlapError(Exception):
    """Base class for all package errors."""


class ConfigurationError(IlapError):
    """A config value is invalid or names an unknown option."""


class IngestionError(IlapError):
    """Dataset files or pretrained weights are missing or unreadable."""


class SchedulingError(IlapError):
    """An exposure schedule cannot be built or materialized."""


class InvariantViolation(IlapError):
    """Internal state broke a documented invariant (e.g. empty val bank)."""


class UnsupportedOperation(IlapError):
    """The backend cannot perform the requested operation."""
