"""Exception types shared across the package."""


class MSNeRVError(Exception):
    """Base class for all package errors."""


class ConfigError(MSNeRVError, ValueError):
    """A configuration value violates a module contract."""


class LoadError(MSNeRVError):
    """A video source could not be read."""

    def __init__(self, message: str, frame: str | int | None = None):
        super().__init__(message)
        self.frame = frame


class BitstreamError(MSNeRVError):
    """A compressed model container is malformed, truncated or corrupt."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(MSNeRVError):
    """The training loss became non-finite."""

    def __init__(self, message: str, level: str | None = None, checkpoint=None):
        super().__init__(message)
        self.level = level
        self.checkpoint = checkpoint
