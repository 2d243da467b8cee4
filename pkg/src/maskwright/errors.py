"""Exception hierarchy shared across the package."""


class MaskwrightError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MaskwrightError, ValueError):
    """Tensor shapes or sizes are inconsistent with an operation's contract."""


class AxisError(MaskwrightError, ValueError):
    """A reduction or transpose axis is out of range or repeated."""


class DomainError(MaskwrightError, ValueError):
    """An input value is outside the mathematical domain of an operation."""


class ConfigError(MaskwrightError, ValueError):
    """A hyperparameter, task spec, or run configuration is invalid."""


class BatchError(MaskwrightError, ValueError):
    """A batch is too small for the requested mode (e.g. batch norm stats)."""


class StateError(MaskwrightError, RuntimeError):
    """An object is used in a state that does not support the operation."""


class DivergenceError(MaskwrightError, RuntimeError):
    """Training produced a non-finite loss."""


class DegenerateMaskError(MaskwrightError, RuntimeError):
    """A mask collapsed to all zeros where a distribution is required."""


class EmptyDatasetError(MaskwrightError, ValueError):
    """A metric was requested over an empty dataset."""


class FormatError(MaskwrightError, ValueError):
    """A file does not conform to its binary or text format contract."""


class CorruptionError(FormatError):
    """Stored checksum does not match the file contents."""


class VersionError(FormatError):
    """A file was written by a newer format version than this build reads."""
