"""Exception types shared across the package."""


class MalformedInputError(ValueError):
    """Input file or argument violates its format."""


class DimensionError(ValueError):
    """Array shapes or row lengths disagree."""


class CapacityError(ValueError):
    """A requested size exceeds a configured maximum."""


class SupportViolationError(ValueError):
    """An importance weight was requested for a neighbor with zero local probability."""


class WorkerError(RuntimeError):
    """Failure inside a simulated worker; carries the worker id."""

    def __init__(self, worker, cause):
        super().__init__(f"worker {worker}: {cause}")
        self.worker = worker
        self.cause = cause
