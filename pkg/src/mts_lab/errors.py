"""Exception types shared across the package.

CLI exit codes map onto three families: configuration problems (2),
data problems (3) and numeric failures (4).
"""


class MTSError(Exception):
    exit_code = 1


class ConfigError(MTSError):
    exit_code = 2


class DataError(MTSError):
    exit_code = 3


class NotFound(DataError):
    pass


class MalformedData(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class InsufficientData(DataError):
    pass


class NumericError(MTSError):
    exit_code = 4


class DimensionError(MTSError, ValueError):
    exit_code = 4


class StepAfterDone(MTSError, RuntimeError):
    pass


class BackwardWithoutForward(MTSError, RuntimeError):
    pass


class DegenerateMetric(MTSError, ArithmeticError):
    """A performance ratio whose denominator vanishes on the given curve."""
