"""Exception types shared across the package."""


class LipsynthError(Exception):
    """Base class for all package errors."""


class ShapeError(LipsynthError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(LipsynthError):
    """Invalid configuration value or layer geometry."""


class DataError(LipsynthError):
    """Corrupt or inconsistent data file (container, manifest, WAV)."""


class AudioError(LipsynthError):
    """Audio input unusable for the requested operation."""


class NonFiniteError(LipsynthError):
    """A loss or gradient became NaN/Inf; the step was aborted."""
