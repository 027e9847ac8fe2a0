"""Exception types shared across the package."""


class LarsFlowError(Exception):
    """Base class for all package-specific errors."""


class NumericsError(LarsFlowError):
    """Non-finite values or other numerical breakdown in a computation."""


class ConfigError(LarsFlowError):
    """Invalid experiment configuration; message names the offending field."""


class CheckpointError(LarsFlowError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


class DataError(LarsFlowError):
    """Malformed input data; message carries row/column context."""


class TrainingDiverged(LarsFlowError):
    """Training hit a non-finite loss.

    Carries the iteration index and a snapshot of the last finite state so
    callers can checkpoint it before giving up.
    """

    def __init__(self, message, iteration, last_state=None):
        super().__init__(message)
        self.iteration = iteration
        self.last_state = last_state
