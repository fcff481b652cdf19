"""Exception hierarchy shared by all modules."""


class ESVDError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class InputError(ESVDError, ValueError):
    pass


class ShapeError(InputError):
    pass


class ConfigError(InputError):
    pass


class DataError(ESVDError):
    exit_code = 2


class SchemaError(DataError):
    pass


class GroupSizeError(DataError):
    pass


class NumericalError(ESVDError, ArithmeticError):
    exit_code = 3


class PositiveDefinitenessError(NumericalError):
    pass


class BracketError(NumericalError):
    pass


class SolverError(NumericalError):
    pass


class SingularityError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass
