"""Exception types shared across the package."""


class GadfitError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(GadfitError, ValueError):
    """Tensor shapes or model dimensions do not line up."""


class ParameterError(GadfitError, ValueError):
    """An argument value is outside its legal range."""


class StateError(GadfitError, RuntimeError):
    """An object is used before it was fitted or initialized."""


class EstimationError(GadfitError, ValueError):
    """Not enough data to estimate the requested statistic."""


class FormatError(GadfitError, ValueError):
    """A serialized artifact is corrupt or has the wrong version."""


class ConfigurationError(GadfitError, ValueError):
    """A run configuration is inconsistent or incomplete."""


class MetricError(GadfitError, ValueError):
    """A metric is undefined for the given inputs (e.g. one class absent)."""


class IngestionError(GadfitError, ValueError):
    """A dataset directory does not match the expected layout."""
