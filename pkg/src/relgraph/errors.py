"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class DataFormatError(ValueError):
    """Malformed dataset file; the message carries the line number."""


class SceneValidationError(ValueError):
    """A scene violates a structural invariant."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the message names the loss term."""


class MismatchError(ValueError):
    """Checkpoint and dataset disagree on a structural dimension."""


class CheckpointError(ValueError):
    """Base class for checkpoint loading failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint schema version is not supported."""


class CheckpointTensorError(CheckpointError):
    """A named tensor is missing from, or unexpected in, a checkpoint."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor's shape does not match the model configuration."""
