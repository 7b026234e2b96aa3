"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries one.
"""


class OneNetError(Exception):
    exit_code = 1


class ConfigError(OneNetError):
    exit_code = 2


class DimensionError(ConfigError, ValueError):
    """Operand shapes do not fit the operation."""


class DataError(OneNetError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(OneNetError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DomainError(NumericError):
    """Input outside the mathematical domain of an op (log of 0, division by 0)."""
