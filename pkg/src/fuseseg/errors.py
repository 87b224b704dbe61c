"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands or parameters have incompatible extents."""


class DataError(ValueError):
    """Bad sample content: labels out of range, empty dataset, malformed files."""


class ConfigError(ValueError):
    """Run configuration failed schema validation."""


class ScheduleError(ValueError):
    """Learning-rate schedule queried outside its domain."""


class TrainingError(RuntimeError):
    """Training cannot continue (missing gradient, non-finite loss)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or has the wrong magic/version."""
