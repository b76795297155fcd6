"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes are incompatible for the requested operation."""


class DegenerateMaskError(ValueError):
    """A softmax row was fully masked (all entries -inf)."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite values are required."""


class ContractError(ValueError):
    """An operation was called outside its stated contract."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A binary file does not match its expected format.

    ``offset`` is the byte position where the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
