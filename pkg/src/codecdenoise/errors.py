class ConfigError(ValueError):
    """Invalid or inconsistent configuration (maps to CLI exit code 2)."""
