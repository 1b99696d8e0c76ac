"""Shared exception types, grouped by the failure class they signal."""


class ConfigError(ValueError):
    """Bad configuration: invalid flag values, unusable config fields."""


class DataError(ValueError):
    """Bad or missing data: files, shapes, label ids, checkpoints."""


class NumericalError(ArithmeticError):
    """Non-finite values where finite arithmetic was required."""


class TrainingDiverged(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")
