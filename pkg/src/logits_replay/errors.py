"""Exception types shared across the package."""


class ReplayError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ReplayError, ValueError):
    pass


class NumericError(ReplayError, ArithmeticError):
    pass


class ValidationError(ReplayError, ValueError):
    pass


class ContractViolation(ReplayError, ValueError):
    """Raised when a caller breaks a documented precondition (e.g. gold not in S)."""


class ParseError(ReplayError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FingerprintMismatch(ReplayError):
    pass


class ConfigError(ReplayError, ValueError):
    pass
