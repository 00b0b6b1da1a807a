"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/shape/metric problems
exit 2, numeric failures exit 3, dataset/disk problems exit 4.
"""


class MaskVadError(Exception):
    """Base class for all package errors."""


class ConfigError(MaskVadError):
    """Invalid configuration value or malformed config file."""


class ShapeError(MaskVadError):
    """Tensor geometry does not match what an operation requires."""


class IngestionError(MaskVadError):
    """Dataset on disk is missing files or internally inconsistent."""


class NumericError(MaskVadError):
    """Non-finite values appeared where finite ones are required."""


class MetricError(MaskVadError):
    """A requested metric is undefined for the given inputs."""
