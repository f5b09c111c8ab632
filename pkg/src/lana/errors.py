"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericDomainError(ArithmeticError):
    """A value left the domain where an operation is defined (log of 0, NaN, ...)."""


class ParseError(ValueError):
    """Malformed interaction file. ``line`` is 1-based and counts the header."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. AUC with one class)."""


class CheckpointError(ValueError):
    """A checkpoint file could not be decoded. ``field`` names the offending part."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
