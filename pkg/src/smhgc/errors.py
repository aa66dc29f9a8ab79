"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SmhgcError(Exception):
    exit_code = 1


class ContractError(SmhgcError, ValueError):
    """A precondition of a public operation was violated."""


class DimensionError(ContractError):
    pass


class UndefinedRatioError(ContractError):
    pass


class FeasibilityError(ContractError):
    pass


class LoadError(SmhgcError):
    """Malformed or inconsistent dataset directory."""


class MissingFileError(LoadError):
    exit_code = 2


class NumericError(SmhgcError, FloatingPointError):
    exit_code = 3
