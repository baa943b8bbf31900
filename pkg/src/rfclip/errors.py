"""Exception hierarchy. CLI exit codes hang off the three top-level families."""


class RFClipError(Exception):
    exit_code = 1


class ConfigError(RFClipError, ValueError):
    """Invalid run or model configuration."""

    exit_code = 2


class ParameterError(ConfigError):
    pass


class DataError(RFClipError):
    """Bad or missing input data."""

    exit_code = 3


class ShapeError(DataError, ValueError):
    pass


class TensorAbsentError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DecodeError(DataError):
    pass


class NumericError(RFClipError, ArithmeticError):
    exit_code = 4


class DegenerateGraphError(NumericError):
    pass


class ContractError(NumericError, AssertionError):
    """A kernel received input violating its documented precondition."""
