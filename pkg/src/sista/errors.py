"""Exception types shared across the package."""


class SistaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SistaError, ValueError):
    pass


class ConfigError(SistaError, ValueError):
    pass


class DegenerateInputError(SistaError, ValueError):
    """A zero vector (or similar) where a direction is required."""


class ContractError(SistaError, ValueError):
    pass


class NumericError(SistaError, ArithmeticError):
    pass


class UsageError(SistaError, RuntimeError):
    pass


class ParseError(SistaError, ValueError):
    """Malformed file. ``line`` is 1-based, or None when the file ended early."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
