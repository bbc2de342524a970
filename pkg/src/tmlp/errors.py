"""Exception hierarchy shared across the package."""


class TmlpError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TmlpError, ValueError):
    pass


class OptimizerError(TmlpError, FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class OracleError(TmlpError, FloatingPointError):
    pass


class ConsistencyError(TmlpError, ValueError):
    pass


class TrainingError(TmlpError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(TmlpError, ValueError):
    pass


class FormatError(TmlpError, ValueError):
    """Container header or layout is malformed."""


class IntegrityError(TmlpError, ValueError):
    """A chunk failed its CRC check."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class UnderflowError(TmlpError, ValueError):
    """Not a single complete layer chunk is available."""
