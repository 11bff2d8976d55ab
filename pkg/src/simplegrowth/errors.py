"""Exception hierarchy shared by every module."""


class SimpleGrowthError(Exception):
    pass


class ShapeError(SimpleGrowthError, ValueError):
    pass


class ArgumentError(SimpleGrowthError, ValueError):
    pass


class ConfigurationError(SimpleGrowthError, ValueError):
    pass


class StateError(SimpleGrowthError, RuntimeError):
    pass


class NumericalError(SimpleGrowthError, ArithmeticError):
    pass


class FormatError(SimpleGrowthError, ValueError):
    """Malformed binary input. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
