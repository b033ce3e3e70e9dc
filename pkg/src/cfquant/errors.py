"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """An unsupported or inconsistent model/experiment configuration."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(ValueError):
    """Array dimensions do not match what the operation expects."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class OracleUnavailableError(RuntimeError):
    """Ground truth cannot be computed for this sample or model family."""


class EstimatorUndefinedError(RuntimeError):
    """The estimator has no data to work with (e.g. an empty MC window)."""


class TrainingError(RuntimeError):
    """Training diverged. ``checkpoint`` holds the last finite state, if any."""

    def __init__(self, message, checkpoint=None, diagnostics=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.diagnostics = diagnostics or {}
