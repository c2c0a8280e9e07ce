class ConfigError(ValueError):
    """Invalid or inconsistent configuration (recipe book, task, run config)."""


class UsageError(RuntimeError):
    """An operation was called in a state or with arguments it does not accept."""
