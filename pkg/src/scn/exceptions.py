"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class NotPositiveDefinite(ArithmeticError):
    """A Cholesky factorization hit a non-positive pivot."""


class NumericalError(ArithmeticError):
    """Non-finite values reached a numerical routine."""


class FormatError(ValueError):
    """A binary file (dataset or checkpoint) does not match its declared layout."""


class ConfigError(ValueError):
    """A network or run configuration is inconsistent."""


class TrainingDiverged(RuntimeError):
    """The training loss or parameters became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
