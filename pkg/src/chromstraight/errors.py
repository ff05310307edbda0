"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """A configuration value or profile violates its invariants."""


class DegenerateBendError(ValueError):
    """A bend folds the chromosome onto itself or pushes it out of the field."""


class DatasetError(OSError):
    """Reading or writing a dataset directory failed."""


class SelectionError(ValueError):
    """Driving selection could not be performed (e.g. empty pool)."""


class MetricError(ValueError):
    """A metric was asked for on inputs it cannot handle."""


class EvaluationError(ValueError):
    """Straightened and reference sets do not line up."""


class NumericError(FloatingPointError):
    """Training produced non-finite values."""
