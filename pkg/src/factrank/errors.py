"""Exception hierarchy shared across the package."""


class FactrankError(Exception):
    """Base class for all library errors."""


class ShapeError(FactrankError):
    """Tensor shapes are incompatible with the requested operation."""


class UsageError(FactrankError):
    """API misuse: bad arguments, wrong call order, invalid configuration."""


class DegenerateInputError(FactrankError):
    """Mathematically degenerate input, e.g. a zero-norm vector or empty phrase."""


class LoadError(FactrankError):
    """Malformed input file; the message names the file and line."""


class DataError(FactrankError):
    """Dataset integrity violation, e.g. dangling ids or missing features."""
