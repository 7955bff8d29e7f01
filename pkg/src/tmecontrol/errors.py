class ConfigurationError(ValueError):
    """Invalid user configuration (bad bounds, sizes, counts)."""


class InputDataError(ValueError):
    """Missing or malformed input data."""


class ValidationFailure(RuntimeError):
    """A numerical validation check exceeded its threshold."""
