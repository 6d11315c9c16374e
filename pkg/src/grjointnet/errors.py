"""Exception hierarchy shared across the package."""


class GRJointError(Exception):
    """Base class for every error raised by grjointnet."""


class DataError(GRJointError):
    """Bad input data (CLI exit code 2)."""


class EmptyCloud(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class LabelRange(DataError):
    pass


class RangeError(DataError):
    pass


class DegenerateInput(DataError):
    pass


class ShapeError(GRJointError, ValueError):
    pass


class ConfigError(GRJointError):
    pass


class NumericError(GRJointError):
    """Non-finite values during training (CLI exit code 3)."""
