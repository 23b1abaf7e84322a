"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so keep the classes coarse.
"""


class MspnError(Exception):
    """Base class for all package errors."""


class ConfigError(MspnError, ValueError):
    """Invalid configuration, shape mismatch or violated precondition."""


class ScheduleError(ConfigError):
    """No iteration schedule exists (e.g. no valid sparse pixels)."""


class ContractError(MspnError, ValueError):
    """An input violates a documented value contract (binary mask, range)."""


class DataError(MspnError, ValueError):
    """Malformed file contents or out-of-range data values."""


class NumericError(MspnError, ArithmeticError):
    """NaN/Inf produced by an op, a gradient, or a diverging training run."""
