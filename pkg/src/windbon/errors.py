"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input violates a documented precondition or invariant."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value where a finite one is required."""
