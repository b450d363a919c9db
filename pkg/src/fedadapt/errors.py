"""Exception types shared across the package.

Config-style errors map to CLI exit code 2, numeric errors to exit code 3.
"""


class ConfigError(Exception):
    """Invalid configuration, inputs, or contract violation by the caller."""


class DimensionError(ConfigError):
    """Array or layer shapes do not line up."""


class FormatError(ConfigError):
    """A file (IDX, checkpoint, dataset cache, config) failed to parse."""


class CalibrationError(ConfigError):
    """Threshold calibration failed, e.g. overlapping diff bands."""


class NumericError(Exception):
    """Non-finite values or a numeric invariant breach; aborts the round."""


class AggregationError(NumericError):
    """Aggregation weight mass violated its tolerance."""
