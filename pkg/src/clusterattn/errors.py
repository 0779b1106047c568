"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class CheckpointError(RuntimeError):
    """Malformed, mismatched, or unreadable checkpoint file."""


class DataError(ValueError):
    """Malformed dataset file or synthetic dataset spec."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. non-finite loss)."""
