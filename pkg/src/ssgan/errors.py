"""Exception hierarchy shared by every module of the package."""


class SSGANError(Exception):
    """Base class. ``field`` names the offending argument, tensor or file field."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ShapeError(SSGANError, ValueError):
    pass


class DomainError(SSGANError, ValueError):
    pass


class ConfigError(SSGANError, ValueError):
    pass


class DataError(SSGANError):
    pass


class CheckpointError(SSGANError):
    pass


class TrainingError(SSGANError, RuntimeError):
    pass
