"""Exception types shared across the package."""


class NacError(Exception):
    """Base class for all package errors."""


class FormatError(NacError):
    """File content does not match the expected on-disk format."""


class RangeError(NacError):
    """Pixel values outside the declared or required range."""


class ShapeError(NacError):
    """Array shapes incompatible with the requested operation."""


class DomainError(NacError):
    """Input values outside the mathematical domain of an operation."""


class ConfigError(NacError):
    """Invalid configuration value; message names the offending key."""


class UnknownBackboneError(NacError):
    """Backbone name not present in the registry."""


class ReservedBackboneError(NacError):
    """Backbone name is reserved in the registry but not implemented."""


class CheckpointError(NacError):
    """Checkpoint file is missing, corrupt, or version-incompatible."""


class TrainingError(NacError):
    """Optimization failed, e.g. the loss became non-finite."""
