"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1, file
format problems exit 2, numeric failures exit 3.
"""


class VimoeError(Exception):
    """Base class for all package errors."""


class ConfigError(VimoeError, ValueError):
    """Invalid model, training or dataset configuration."""


class ContractError(VimoeError, ValueError):
    """An operation was called outside its precondition."""


class DimensionError(ContractError):
    """Operand shapes do not agree."""


class NumericError(VimoeError, ArithmeticError):
    """NaN or other non-finite values where finite ones are required."""


class FormatError(VimoeError):
    """A binary container is malformed.

    ``offset`` is the byte position at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
