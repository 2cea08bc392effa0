class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (CLI exit code 2)."""

    exit_code = 2


class DataError(ConfigError):
    """Dataset missing, unreadable or inconsistent with the requested partition."""


class ArtifactError(RuntimeError):
    """Checkpoint or run-directory artifact is corrupt or does not match (exit code 3)."""

    exit_code = 3


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss (exit code 4)."""

    exit_code = 4

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
