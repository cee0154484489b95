class StSpikeError(Exception):
    """Base class for errors raised by this package."""


class InputError(StSpikeError, ValueError):
    """Invalid argument, shape or configuration."""


class NumericalError(StSpikeError, ArithmeticError):
    """A factorization or moment computation broke down."""
