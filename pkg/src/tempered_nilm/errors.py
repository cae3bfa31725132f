"""Exception hierarchy shared by every module."""


class NilmError(Exception):
    pass


class ShapeError(NilmError, ValueError):
    pass


class DomainError(NilmError, ValueError):
    pass


class DegenerateError(NilmError, ValueError):
    """A row, sequence or label set has no usable entries."""


class NumericError(NilmError, ArithmeticError):
    pass


class DataError(NilmError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    ``last_good`` holds the parameter snapshot taken before the failing step.
    """

    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch
