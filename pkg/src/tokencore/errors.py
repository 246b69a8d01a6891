"""Exception types shared across the package.

The CLI maps these onto exit codes: InvalidArgumentError -> 2,
InvariantViolationError -> 3, OSError -> 1.
"""


class InvalidArgumentError(ValueError):
    """A caller-supplied value violates an operation's precondition."""


class SizeLimitError(InvalidArgumentError):
    """Input exceeds a hard combinatorial size guard."""


class StateError(RuntimeError):
    """Operation invoked on an object in the wrong state (e.g. a trace
    recorded without gradient capture passed to the backward pass)."""


class TrainingFailureError(RuntimeError):
    """Training diverged.  Carries the epoch index where it happened."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class InvariantViolationError(RuntimeError):
    """A hard internal invariant failed; results cannot be trusted."""
