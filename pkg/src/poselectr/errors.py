"""Exception types shared by every module."""


class PoseLecTrError(Exception):
    """Base class for library errors."""


class DimensionError(PoseLecTrError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PoseLecTrError, ValueError):
    """A documented precondition was violated."""


class NumericalError(PoseLecTrError, ArithmeticError):
    """An iterative method failed to converge.

    ``last_iterate`` carries whatever the method had when it gave up.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class DegenerateFeatureError(ContractError):
    """A feature row has zero norm, so cosine similarity is undefined."""

    def __init__(self, row):
        super().__init__(f"feature row {row} has zero norm")
        self.row = row


class ConfigurationError(PoseLecTrError, ValueError):
    """Model configuration is inconsistent with the input."""
