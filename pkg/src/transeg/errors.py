"""Shared exception types."""


class ConfigurationError(ValueError):
    """Invalid configuration or violated dataclass invariant."""


class NumericError(ArithmeticError):
    """Non-finite value produced during numeric computation."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"loss became non-finite at iteration {iteration}")


class DataFormatError(ValueError):
    """Corrupt or unrecognized on-disk artifact."""
