"""Exception types shared across the package.

Each maps onto one CLI exit code (see ``epcl.cli``).
"""


class EPCLError(Exception):
    """Base class for package errors."""


class ConfigError(EPCLError, ValueError):
    """Invalid configuration or model setup."""


class DimensionError(ConfigError):
    """Tensor shapes or widths do not line up."""


class ContractError(EPCLError, RuntimeError):
    """An operation was called outside its documented preconditions."""


class DataError(EPCLError, ValueError):
    """Malformed or insufficient input data."""


class FormatError(DataError):
    """A file on disk does not follow its declared format."""


class NumericalError(EPCLError, ArithmeticError):
    """Training diverged (NaN or Inf loss)."""


class ArgumentError(DataError):
    """A count or index argument is incompatible with the data it applies to."""
