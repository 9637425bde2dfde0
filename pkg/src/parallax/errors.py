"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NumericError(ArithmeticError):
    """Raised on non-finite values or inputs outside a numeric contract."""


class UsageError(ValueError):
    """Raised when an API is called with arguments violating its preconditions."""


class FormatError(ValueError):
    """Raised when a file does not follow the expected binary or text layout."""


class ConfigError(ValueError):
    """Raised for unparseable or invalid configuration files."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ExplosionError(RuntimeError):
    """Raised when training diverges; carries the offending statistics."""

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats
