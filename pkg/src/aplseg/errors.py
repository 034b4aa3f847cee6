"""Exception types shared across the package."""


class NumericFault(ArithmeticError):
    """A tensor operation produced or received NaN/Inf values."""


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptySupportMask(ValueError):
    """The support mask contains no foreground pixels."""


class SplitViolation(ValueError):
    """Train and test class sets overlap."""


class DatasetError(ValueError):
    """Base class for on-disk dataset problems."""


class EmptyDataset(DatasetError):
    pass


class MissingMask(DatasetError):
    pass


class DimensionMismatch(DatasetError):
    pass


class UnreadableFile(DatasetError):
    pass


class InvalidMaskValue(DatasetError):
    """Mask pixel outside {0, 255}."""


class GenerationFailed(RuntimeError):
    """Synthetic generator could not produce a valid sample."""


class ConfigError(ValueError):
    """Run-configuration file could not be parsed."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss."""
