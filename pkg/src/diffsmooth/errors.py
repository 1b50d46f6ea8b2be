"""Exception hierarchy shared by the library and the command line.

Each class carries the process exit code the CLI reports for it.
"""


class DiffSmoothError(Exception):
    exit_code = 1


class ValidationError(DiffSmoothError, ValueError):
    exit_code = 2


class SchemaError(ValidationError):
    exit_code = 3


class ParseError(ValidationError):
    exit_code = 3

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class InsufficientDataError(ValidationError):
    exit_code = 4


class DimensionMismatchError(ValidationError):
    exit_code = 5


class DomainError(ValidationError):
    exit_code = 2


class NumericalError(DiffSmoothError, ArithmeticError):
    exit_code = 6


class SeedError(DiffSmoothError):
    exit_code = 7
