"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An argument violates a documented precondition."""


class BudgetError(ValidationError):
    """A sampling budget cannot satisfy the mandatory sample set."""


class FormatError(ValueError):
    """A file on disk is truncated, corrupt or of the wrong version."""

    def __init__(self, message, path=None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class TrainingError(RuntimeError):
    """Training hit a non-finite value; ``snapshot`` holds the state at failure."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class SolverError(RuntimeError):
    """An iterative solver produced non-finite iterates."""

    def __init__(self, message, iterates=None):
        super().__init__(message)
        self.iterates = iterates or []
