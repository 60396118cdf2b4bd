"""Shared exception types."""


class ShapeError(ValueError):
    """Inputs violate a documented shape or value contract."""


class NumericError(RuntimeError):
    """A computation produced non-finite or otherwise unusable values."""


class ConfigError(ValueError):
    """A run configuration is missing, malformed, or inconsistent."""
