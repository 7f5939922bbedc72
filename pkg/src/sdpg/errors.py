"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class NonFiniteError(FloatingPointError):
    """A NaN or inf showed up where only finite values are allowed."""

    def __init__(self, message: str, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(ValueError):
    """Bad configuration file or unknown option."""


class UnsupportedError(ValueError):
    """The requested operation is not defined for this environment."""
