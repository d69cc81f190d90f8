"""Exception types shared across the package."""


class RectiflowError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RectiflowError):
    """Array shapes or widths are inconsistent with the operation."""


class EmptySequenceError(DimensionError):
    """A sequence input that must be nonempty has length zero."""


class DomainError(RectiflowError):
    """A numeric argument lies outside its admissible range."""


class NumericError(RectiflowError):
    """Non-finite values were produced or supplied where finite ones are required."""


class ConfigError(RectiflowError):
    """Invalid, missing, or unknown configuration."""


class StateError(RectiflowError):
    """Operation called in the wrong order (e.g. backward without a forward)."""


class IntegrationError(RectiflowError):
    """ODE integration failed (step underflow, step budget, non-finite state)."""


class CheckpointError(RectiflowError):
    """Checkpoint file is unreadable, truncated, or structurally inconsistent."""
