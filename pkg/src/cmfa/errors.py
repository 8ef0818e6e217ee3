"""Error types shared across the package."""


class ValidationError(ValueError):
    """Invalid input data or configuration (CLI exit code 1)."""


class NumericalError(FloatingPointError):
    """Non-finite value or numerical breakdown during fitting (CLI exit code 2)."""
