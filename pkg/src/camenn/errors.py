"""Shared exception types."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


class DataParseError(ValueError):
    """Raised on malformed dataset or checkpoint files."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ConfigError(ValueError):
    """Raised on malformed or inconsistent configuration."""
