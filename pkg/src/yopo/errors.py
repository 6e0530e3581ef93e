class YopoError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(YopoError, ValueError):
    """Bad arguments: dimension mismatch, invalid config, out-of-range label."""

    exit_code = 2


class FormatError(YopoError, ValueError):
    """Malformed file: IDX payload, metrics CSV, checkpoint, config."""

    exit_code = 2


class NumericError(YopoError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 3
