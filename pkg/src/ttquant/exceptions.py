"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(ValueError):
    """Input contains NaN or Inf."""


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap without converging."""


class DivergenceError(RuntimeError):
    """An iterative solver blew up (loss grew past the allowed factor)."""


class BudgetError(ValueError):
    """Exhaustive enumeration would exceed the allowed budget."""


class FormatError(ValueError):
    """A serialized tensor or container is malformed."""


class ChecksumError(FormatError):
    """Stored CRC32 does not match the container contents."""
