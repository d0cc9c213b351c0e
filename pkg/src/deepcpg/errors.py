"""Exception types shared across the package."""


class StructuralError(ValueError):
    """Array sizes or indices do not fit together."""


class NumericError(FloatingPointError):
    """A computation produced a non-finite value."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(OSError):
    """A checkpoint file is unreadable, corrupt or does not fit the run."""
