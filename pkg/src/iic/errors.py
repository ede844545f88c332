"""Exception hierarchy; the CLI maps each class to an exit code."""


class IICError(Exception):
    exit_code = 1


class UsageError(IICError, ValueError):
    exit_code = 1


class DataError(IICError, ValueError):
    """Malformed files, bad indices, shape mismatches."""

    exit_code = 2


class NumericError(IICError, ArithmeticError):
    """Non-finite loss, degenerate norms."""

    exit_code = 3


class DegenerateNormError(NumericError):
    pass


class StaleCacheError(IICError, RuntimeError):
    exit_code = 3
