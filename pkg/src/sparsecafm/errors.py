"""Exception types shared across the package."""


class SparseCafmError(Exception):
    """Base class for all package errors."""


class ValidationError(SparseCafmError, ValueError):
    pass


class DimensionError(SparseCafmError, ValueError):
    pass


class NormStateError(SparseCafmError, ValueError):
    pass


class ScanFormatError(SparseCafmError):
    """File is not a SCAF container (bad magic or unknown version)."""


class ScanCorruptionError(SparseCafmError):
    """File header is valid but the payload or trailer is damaged."""


class GenerationError(SparseCafmError):
    pass


class ConfigError(SparseCafmError, ValueError):
    pass


class NumericError(SparseCafmError, FloatingPointError):
    pass


class ResourceError(SparseCafmError):
    """Problem size exceeds a configured guardrail."""


class TrainingDivergedError(SparseCafmError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
