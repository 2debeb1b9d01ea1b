"""Exception and warning types shared across the package."""


class EHDError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class PreconditionError(EHDError, ValueError):
    exit_code = 3


class ParseError(EHDError, ValueError):
    """Malformed input file. ``line`` is the 1-based line number in the file, if known."""

    exit_code = 2

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        if line is not None:
            message = f"line {line}: {message}"
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class FitError(EHDError):
    exit_code = 4


class InsufficientData(FitError):
    pass


class FitDivergence(FitError):
    pass


class MismatchedGeometry(PreconditionError):
    pass


class NonConstantVoltage(PreconditionError):
    pass


class InsufficientDuration(PreconditionError):
    pass


class GridTooLarge(PreconditionError):
    pass


class EmptyFeasibleSet(EHDError):
    exit_code = 5

    def __init__(self, message, violations=None):
        self.violations = dict(violations or {})
        super().__init__(message)


class EmptyParetoSet(EHDError):
    exit_code = 5


class ModelViolationWarning(UserWarning):
    """Fitted or requested parameters fall outside the model's physical range."""


class ShieldingWarning(UserWarning):
    """Inter-stage spacing below the 2d electrostatic shielding rule."""
