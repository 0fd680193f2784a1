"""Shared exception types."""


class DimensionMismatchError(ValueError):
    """An input vector or matrix has an incompatible shape."""


class NonFiniteError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message: str, location: str = ""):
        super().__init__(message)
        self.location = location


class DivergenceError(RuntimeError):
    """An optimization run blew up; carries the last finite step index."""

    def __init__(self, message: str, step: int | None = None, time: float | None = None):
        super().__init__(message)
        self.step = step
        self.time = time


class StepSizeUnderflowError(RuntimeError):
    """The adaptive integrator could not make progress (stiffness)."""

    def __init__(self, message: str, time_reached: float):
        super().__init__(message)
        self.time_reached = time_reached


class NewtonError(RuntimeError):
    """The dual Newton solver did not reach the requested residual."""

    def __init__(self, message: str, best_residual: float):
        super().__init__(message)
        self.best_residual = best_residual


class NotConvergedError(RuntimeError):
    """An operation that requires a converged trajectory got an unconverged one."""
