"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: unknown names, bad shapes declared up front."""


class ShapeError(ValueError):
    """Runtime dimension mismatch between arrays."""


class NumericError(RuntimeError):
    """Numerical failure: non-finite values, factorization breakdown."""
