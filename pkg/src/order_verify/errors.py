"""Exception types shared across the package."""


class OrderVerifyError(Exception):
    """Base class for domain errors raised by this package."""


class ConfigError(OrderVerifyError):
    """Invalid configuration value; carries the offending field name."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FormatError(OrderVerifyError):
    """Malformed file contents: bad magic, truncated record, shape mismatch."""


class GapError(OrderVerifyError):
    """A clip directory is missing one or more frame indices."""
