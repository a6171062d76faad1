"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor or matrix shapes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Raised for invalid architecture or training configuration."""


class FormatError(ValueError):
    """Raised when a model file is malformed, truncated, or version-incompatible."""


class TrainingDiverged(RuntimeError):
    """Raised when training produces a non-finite loss."""
