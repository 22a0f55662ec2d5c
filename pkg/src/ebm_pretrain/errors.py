"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a forward or gradient computation."""

    def __init__(self, message, step=None, location=None):
        super().__init__(message)
        self.step = step
        self.location = location


class CorruptCheckpointError(IOError):
    """A checkpoint file is truncated or malformed."""


class ConfigError(ValueError):
    """A run configuration could not be parsed or validated."""
