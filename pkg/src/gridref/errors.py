"""Shared exception types."""


class ConfigurationError(ValueError):
    """Raised when a config (world, metrics corpus, run setup) is unusable."""


class FrozenModelError(RuntimeError):
    """Raised on attempts to update parameters of a frozen checkpoint."""
