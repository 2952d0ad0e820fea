"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class NumericError(ArithmeticError):
    """A forward value became NaN or infinite."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class FormatError(ValueError):
    """A file on disk does not follow its declared format."""


class ProtocolError(ValueError):
    """The dataset cannot satisfy the requested episode protocol."""
