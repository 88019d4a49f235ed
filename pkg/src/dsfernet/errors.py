"""Exception types. Each carries the CLI exit code for its failure category."""


class DsferError(Exception):
    exit_code = 1


class ConfigError(DsferError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Operand dimensions do not conform."""


class DataError(DsferError):
    exit_code = 3


class NumericError(DsferError, ArithmeticError):
    exit_code = 4
