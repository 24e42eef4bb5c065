"""Exception hierarchy shared across the package."""


class ReportGenError(Exception):
    pass


class DimensionError(ReportGenError, ValueError):
    pass


class ContractError(ReportGenError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(ReportGenError, ValueError):
    pass


class DataError(ReportGenError, ValueError):
    pass


class CorruptDataError(DataError):
    pass


class VocabularyError(ReportGenError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class LengthError(ReportGenError, ValueError):
    pass


class NumericAbort(ReportGenError, FloatingPointError):
    """Raised when a non-finite gradient is found during optimization."""

    def __init__(self, param_name: str, message: str = ""):
        self.param_name = param_name
        super().__init__(message or f"non-finite gradient in parameter {param_name!r}")
