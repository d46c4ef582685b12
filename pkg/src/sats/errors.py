"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` used by the command-line front end:
3 for bad input data, 4 for numerical faults.
"""


class SatsError(Exception):
    exit_code = 3


class DataError(SatsError):
    exit_code = 3


class MalformedHeader(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class DegenerateVolume(DataError):
    pass


class InfeasibleSpec(DataError):
    def __init__(self, message, case_index=None):
        super().__init__(message)
        self.case_index = case_index


class EmptyMask(DataError):
    def __init__(self, side):
        super().__init__(f"{side} mask is empty")
        self.side = side


class MissingCase(DataError):
    pass


class PatchTooLarge(DataError):
    pass


class InvalidConfig(SatsError, ValueError):
    exit_code = 2


class NumericalFault(SatsError):
    exit_code = 4

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DoubleBackward(SatsError):
    exit_code = 4
