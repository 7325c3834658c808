"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised for malformed chains, task hierarchies or scenario files."""


class TaskLogicError(RuntimeError):
    """Raised when an operation is applied to a task of the wrong kind or state."""


class NumericalAbort(RuntimeError):
    """Raised when the simulated state stops being finite."""

    def __init__(self, index: int, t: float, message: str = "non-finite joint state"):
        super().__init__(f"{message} at cycle {index} (t={t:.6g} s)")
        self.index = index
        self.t = t
