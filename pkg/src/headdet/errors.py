"""Exception types shared across the package."""


class HeadError(Exception):
    """Base class for all package errors."""


class ShapeError(HeadError, ValueError):
    """An array does not have the dimensions an operation requires."""


class FormatError(HeadError, ValueError):
    """A binary or text artifact is malformed."""


class ContractError(HeadError, ValueError):
    """A documented precondition of an operation was violated."""


class DegenerateDataError(ContractError):
    """Not enough (or not varied enough) data to fit a statistic."""


class ConvergenceError(HeadError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(f"{message} (iterations={iterations}, residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class StageError(HeadError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
