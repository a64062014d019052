"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid experiment, environment or estimator configuration."""


class InputError(ValueError):
    """Invalid argument to a numerical routine."""


class ResourceError(RuntimeError):
    """A computation would exceed a configured size cap."""


class DegenerateRatioError(ValueError):
    """Behavior policy gives zero probability to an observed action."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, message, step=None, loss=None):
        super().__init__(message)
        self.step = step
        self.loss = loss
