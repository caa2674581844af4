"""Exception hierarchy shared by every subpackage."""

from __future__ import annotations


class PcpError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PcpError, ValueError):
    """Operand shapes are incompatible with an op's shape formula."""


class NumericError(PcpError, ArithmeticError):
    """A computation produced a non-finite value, or is undefined (zero norm)."""


class UsageError(PcpError, RuntimeError):
    """An API was called in an invalid state (e.g. backward on a non-scalar)."""


class DataError(PcpError, ValueError):
    """Invalid data or configuration content."""


class FormatError(DataError):
    """A serialized file could not be parsed.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ValidationError(DataError):
    """A file parsed but a record violates a format invariant."""
