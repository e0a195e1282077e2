"""Exception types that map to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or unknown configuration/plan content (exit code 2)."""


class MissingArtifactError(FileNotFoundError):
    """A required input artifact is absent (exit code 4)."""
