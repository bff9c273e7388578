"""Exception hierarchy shared by every module of the package."""


class PredNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PredNetError, ValueError):
    """Operand shapes or channel counts do not line up."""


class NumericError(PredNetError, FloatingPointError):
    """A NaN or Inf was produced."""


class ContractError(PredNetError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(PredNetError, ValueError):
    """An experiment or model configuration is invalid."""


class FormatError(PredNetError, ValueError):
    """A binary container or data file is malformed."""
