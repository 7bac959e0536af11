"""Exception types shared across the package."""


class PrivestError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PrivestError):
    """Invalid configuration: bad schema, shapes, or parameter values."""


class InstanceTooLargeError(PrivestError):
    """Exact enumeration was requested on an instance above the path guard."""


class ImpossibleActionError(PrivestError):
    """A belief update was conditioned on an output with zero probability."""


class ImpossibleHistoryError(PrivestError):
    """A conditional quantity was requested for a zero-probability history."""


class ImpossibleObservationError(PrivestError):
    """A filter received an observation with zero likelihood in every state."""
