"""
Error types raised across the lab. Every error the CLI knows how to report
derives from LabError.
"""


class LabError(Exception):
    """Base class for errors reported to the user with a one-line diagnostic."""


class RejectedInputError(LabError, ValueError):
    """Input data has the wrong shape, length, label range or file format."""


class ParameterError(LabError, ValueError):
    """A scalar parameter is outside its valid range (e.g. temperature <= 0)."""


class ConfigurationError(LabError, ValueError):
    """An experiment, sampler or model configuration is inconsistent."""


class DivergenceError(LabError, ArithmeticError):
    """A loss or gradient became non-finite during training."""


class MissingStatisticError(LabError, ValueError):
    """A similarity statistic has no qualifying pairs to average over."""


class OutputError(LabError, OSError):
    """An artefact could not be written; the message names the path."""
