"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A parameter or configuration value is outside its allowed range."""


class NotLocatedError(RuntimeError):
    """No watermarked region could be found in a mask."""


class CheckpointError(RuntimeError):
    """A checkpoint directory is incomplete or incompatible."""


class MissingArtifactError(FileNotFoundError):
    """A required prerequisite (checkpoint, dataset, file) does not exist."""
