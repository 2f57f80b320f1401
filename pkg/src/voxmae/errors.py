"""Exception types shared across the package."""


class VoxmaeError(Exception):
    """Base class for package errors."""


class InvalidArgument(VoxmaeError, ValueError):
    pass


class FormatError(VoxmaeError, ValueError):
    """A file did not match its declared on-disk layout."""


class NumericError(VoxmaeError, ArithmeticError):
    """Non-finite loss or gradient encountered during training."""


class UndefinedMetric(VoxmaeError, ValueError):
    """Metric is undefined for the given labels (e.g. a single class)."""
