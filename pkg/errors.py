"""
ReadLens error hierarchy.

Two branches decide how the command line exits:
ValidationError -> exit code 2, ComputationError -> exit code 1.
"""


class ReadLensError(Exception):
    """Base class for every error raised on purpose by ReadLens."""

    exit_code = 1


class ValidationError(ReadLensError, ValueError):
    """Bad input: malformed files, out-of-range settings, inconsistent shapes."""

    exit_code = 2


class ComputationError(ReadLensError, RuntimeError):
    """A computation ran but its result cannot be trusted (NaN, failed gradient check)."""

    exit_code = 1
