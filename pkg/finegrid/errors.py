"""Exception hierarchy shared by every finegrid module."""


class FinegridError(Exception):
    """Base class for all finegrid errors."""


class DimensionError(FinegridError, ValueError):
    """Operand shapes do not fit together."""


class UsageError(FinegridError, RuntimeError):
    """An API was called in a state or with arguments it does not support."""


class NumericError(FinegridError, FloatingPointError):
    """A forward computation produced NaN or Inf."""


class NumericDomainError(NumericError):
    """A value fell outside the domain of a function (e.g. log of a non-positive sum)."""


class FormatError(FinegridError, ValueError):
    """A grid or CSV file is malformed."""


class CheckpointError(FinegridError, ValueError):
    """A checkpoint cannot be read or does not match the model it is loaded into."""


class ConfigError(FinegridError, ValueError):
    """A run configuration is invalid."""


class TrainingError(FinegridError, RuntimeError):
    """Training could not make progress (e.g. every anchor was skipped)."""
