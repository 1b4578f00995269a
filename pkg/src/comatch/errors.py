"""Exception types shared across the package.

Each maps onto one CLI exit code (see ``comatch.cli``).
"""


class ComatchError(Exception):
    """Base class for all package errors."""


class DimensionError(ComatchError, ValueError):
    """Tensor extents are incompatible with the operation."""


class ParameterError(ComatchError, ValueError):
    """A scalar argument is outside its admissible range."""


class ContractError(ComatchError, RuntimeError):
    """A documented precondition on the inputs is violated."""


class DataError(ComatchError):
    """The corpus cannot satisfy the request (empty set, no shared class...)."""


class ParseError(DataError):
    """A file on disk is malformed."""


class NumericAbort(ComatchError, ArithmeticError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
