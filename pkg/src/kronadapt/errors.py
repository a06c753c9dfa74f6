"""Exception hierarchy shared by all kronadapt modules."""


class KronError(Exception):
    """Base class for every error raised by kronadapt."""


class ShapeError(KronError, ValueError):
    pass


class ConfigError(KronError, ValueError):
    """Invalid component design (divisibility, non-positive sizes, ...)."""


class ParameterError(KronError, ValueError):
    pass


class PreconditionError(KronError, ValueError):
    pass


class NumericalError(KronError, ArithmeticError):
    """An iterative routine failed to converge."""


class DegenerateSpectrumError(KronError, ArithmeticError):
    pass


class InfeasibleBudgetError(KronError, ValueError):
    pass


class ParseError(KronError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
