"""Exception types shared across the toolkit."""


class ContractError(ValueError):
    """An input violates a documented precondition (shape, range, invariant)."""


class NumericRangeError(ArithmeticError):
    """A computation produced a non-finite value (overflow / invalid)."""


class ParseError(ValueError):
    """Malformed input text; carries the offending line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConversionError(ValueError):
    """Dataset conversion failed (missing image, degenerate geometry, ...)."""


class DetectorError(RuntimeError):
    """A plugged-in detector failed or violated its wire protocol."""
