"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """Raised when a caller violates an API precondition."""


class NumericDomainError(ValueError):
    """Raised when an input lies outside a function's real domain."""


class ConfigError(ValueError):
    """Raised for invalid model or training configuration."""


class FormatError(ValueError):
    """Raised when a file does not match its expected binary/text layout.

    ``offset`` is the byte offset (or line number for text formats) where
    the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset
