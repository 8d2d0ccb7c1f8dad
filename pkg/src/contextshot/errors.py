"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An argument or input violates an operation's contract."""


class ConfigError(ValidationError):
    """A model or run configuration is internally inconsistent."""


class StructureError(ValidationError):
    """A dataset does not have the expected on-disk layout or content."""


class CapacityError(ValidationError):
    """A sampling request exceeds what the source can provide."""


class NumericError(ValueError):
    """Non-finite values were found where finite ones are required."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""
