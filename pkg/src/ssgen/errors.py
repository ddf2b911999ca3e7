"""Exception hierarchy shared by every module.

Each class maps to one CLI exit status (see ``ssgen.cli``).
"""


class SSGenError(Exception):
    exit_code = 1


class ContractError(SSGenError, ValueError):
    """A caller violated an operation's preconditions (shapes, ranges)."""

    exit_code = 2


class ConfigError(SSGenError, ValueError):
    exit_code = 2


class DataError(SSGenError, ValueError):
    exit_code = 3


class NumericFailure(SSGenError, ArithmeticError):
    """NaN or Inf appeared in a computation."""

    exit_code = 4


class DegenerateDataError(DataError):
    pass
