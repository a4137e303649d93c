"""Exception hierarchy. Each category maps to a distinct CLI exit code."""


class HetsimError(Exception):
    exit_code = 1


class ConfigError(HetsimError, ValueError):
    exit_code = 2


class NumericError(HetsimError, ArithmeticError):
    exit_code = 3


class ShapeError(NumericError, ValueError):
    pass


class MeasurementError(HetsimError, ValueError):
    exit_code = 3


class InfeasibleAllocationError(HetsimError, ValueError):
    exit_code = 4


class ConstraintInfeasibleError(HetsimError):
    """Global-batch constraint could not be met inside the bound box.

    ``plan`` carries the best-effort result (bounds respected, sum off target).
    """

    exit_code = 4

    def __init__(self, message, plan=None, records=None):
        super().__init__(message)
        self.plan = plan
        self.records = records or []
