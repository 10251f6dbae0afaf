"""Exception types shared across the package."""


class FusionError(Exception):
    """Base class for all package errors."""


class ShapeError(FusionError, ValueError):
    """Operands have incompatible shapes; message names both shapes."""


class ConfigurationError(FusionError, ValueError):
    """A parameter combination is invalid (non-integral conv output,
    singular stain matrix, batch size below the minimum, ...)."""


class DegenerateBatchError(FusionError, ValueError):
    """Batch statistics requested over fewer than two elements."""


class ContractError(FusionError, ValueError):
    """A documented precondition was violated (non-scalar loss,
    weighting factor outside [0, 1], ...)."""


class DivergenceError(FusionError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, lr: float):
        self.epoch = epoch
        self.lr = lr
        super().__init__(f"non-finite loss at epoch {epoch} (lr={lr:g})")


class StreamExhaustedError(FusionError, RuntimeError):
    """A batch stream ended before the requested number of steps."""

    def __init__(self, completed: int, requested: int):
        self.completed = completed
        self.requested = requested
        super().__init__(
            f"batch stream exhausted after {completed} of {requested} steps"
        )


class LoadError(FusionError, OSError):
    """A dataset, manifest, or checkpoint could not be loaded."""


class ConfigFileError(FusionError, ValueError):
    """The configuration document contains unknown keys or bad values."""
