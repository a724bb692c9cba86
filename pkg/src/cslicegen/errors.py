"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(ValueError):
    pass


class DataError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class CheckpointError(RuntimeError):
    pass


class FingerprintError(CheckpointError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; ``snapshot`` holds the diagnostic state."""

    def __init__(self, message, snapshot=None):
        self.snapshot = snapshot
        super().__init__(message)
