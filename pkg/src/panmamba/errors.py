"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config -> 1, data/format -> 2,
numeric -> 3.
"""


class PanMambaError(Exception):
    exit_code = 1


class UsageError(PanMambaError, ValueError):
    exit_code = 1


class ConfigError(PanMambaError, ValueError):
    exit_code = 1


class DimensionError(PanMambaError, ValueError):
    exit_code = 2


class FormatError(PanMambaError, ValueError):
    exit_code = 2


class CorruptionError(FormatError):
    pass


class NumericError(PanMambaError, ArithmeticError):
    exit_code = 3
