"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class ShapeError(ContractError):
    """Operand shapes are incompatible with the requested operation."""


class ParseError(ValueError):
    """A data file could not be parsed; the message carries the line number."""


class SchemaError(ValueError):
    """A data file parsed but violates the expected record schema."""
