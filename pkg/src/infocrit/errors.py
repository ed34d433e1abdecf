"""Exception hierarchy. Each class carries the process exit code the CLI uses."""


class InfocritError(Exception):
    exit_code = 1


class UsageError(InfocritError, ValueError):
    """Bad arguments: wrong shapes, empty inputs, too few draws."""

    exit_code = 2


class NumericInputError(InfocritError, ValueError):
    """Inputs contain NaN or other non-finite values where finite ones are required."""

    exit_code = 3


class NotPositiveDefiniteError(InfocritError, ArithmeticError):
    """A covariance matrix failed its Cholesky factorization."""

    exit_code = 4


class SamplerError(InfocritError, RuntimeError):
    exit_code = 5
