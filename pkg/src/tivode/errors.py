"""Exception hierarchy shared by every tivode module."""


class TivodeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TivodeError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(TivodeError, ValueError):
    """A precondition of an operation was violated."""


class InputError(TivodeError, ValueError):
    """User-supplied data (captions, grids, dataset params) is invalid."""


class FormatError(TivodeError):
    """A file on disk does not match the expected binary or text format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.offset = offset


class SolverError(TivodeError):
    """Base class for numerical integration failures."""

    def __init__(self, message, t=None, h=None):
        parts = [message]
        if t is not None:
            parts.append(f"t={t:.6g}")
        if h is not None:
            parts.append(f"h={h:.3g}")
        super().__init__(", ".join(parts))
        self.t = t
        self.h = h


class IntegrationError(SolverError):
    """A stage evaluation produced non-finite values."""


class StiffnessError(SolverError):
    """The adaptive controller rejected a step at the minimum step size."""


class StepBudgetError(SolverError):
    """The solver exceeded its maximum number of steps."""


class UnsupportedGridError(TivodeError, ValueError):
    """A step-wise transition model was asked for a non-uniform time grid."""


class TrainingError(TivodeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, seed=None, step=None):
        if seed is not None:
            message = f"{message} (replay seed {seed}, step {step})"
        super().__init__(message)
        self.seed = seed
        self.step = step
