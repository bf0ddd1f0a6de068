"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during evaluation.

    ``location`` carries whatever coordinates the raiser knows about,
    e.g. ``{"block": 3}`` or ``{"epoch": 2, "batch": 17}``.
    """

    def __init__(self, message, **location):
        super().__init__(message)
        self.location = location


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration."""


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""
