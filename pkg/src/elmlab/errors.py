"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: config problems exit 2,
data/format problems exit 3, numerical failures exit 4.
"""


class ElmError(Exception):
    exit_code = 1


class ConfigError(ElmError, ValueError):
    exit_code = 2


class ContractError(ElmError, ValueError):
    """A documented precondition of an operation was violated."""

    exit_code = 2


class ShapeError(ContractError):
    pass


class RangeError(ContractError, IndexError):
    pass


class FormatError(ElmError):
    exit_code = 3


class NumericalError(ElmError, ArithmeticError):
    exit_code = 4


class TrainingDiverged(NumericalError):
    """Raised when a loss turns non-finite. ``last_good`` holds the most
    recent finite checkpoint, if the trainer produced one."""

    def __init__(self, message, last_good=None, diagnostics=None):
        super().__init__(message)
        self.last_good = last_good
        self.diagnostics = diagnostics or {}
