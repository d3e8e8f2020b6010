"""Package-level exception types."""


class NumericFailure(ArithmeticError):
    """A computation produced non-finite values (overflow, divergence, bad FD step)."""
