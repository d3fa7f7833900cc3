"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class ItiGenError(Exception):
    exit_code = 1


class ValidationError(ItiGenError, ValueError):
    exit_code = 2


class SchemaError(ValidationError):
    pass


class SequenceLengthError(ValidationError):
    pass


class PreconditionError(ValidationError):
    pass


class IngestionError(ValidationError):
    """Raised when images or label files cannot be read.

    ``paths`` lists every offending file so callers can report them together.
    """

    def __init__(self, message, paths=()):
        super().__init__(message)
        self.paths = list(paths)


class BackendUnavailable(ItiGenError, RuntimeError):
    exit_code = 3


class NumericError(ItiGenError, ArithmeticError):
    exit_code = 4
