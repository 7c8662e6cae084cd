class ValidationError(ValueError):
    """Input violates a documented precondition."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""
