"""Exception hierarchy shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class UnsupportedCombinationError(ContractViolationError):
    """A valid-looking but unsupported combination of inputs (e.g. one-norm
    data fit with a non-identity operator)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class SingularityError(NumericError):
    """Evaluation too close to a singular point (e.g. radial prior at the origin)."""


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite. Carries the last finite parameter state."""

    def __init__(self, message, last_params=None, step=None):
        super().__init__(message)
        self.last_params = last_params
        self.step = step


class SolverError(RuntimeError):
    """An iterative solver failed to meet its contract."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class CounterModelError(SolverError):
    """Measured operation counts deviate from the predicted complexity model."""
