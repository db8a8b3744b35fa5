"""Exception hierarchy shared by every package."""
from typing import Iterable


class GsdfError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(GsdfError):
    """Invalid configuration; carries the offending keys."""

    def __init__(self, message: str, keys: Iterable[str] = ()):
        self.keys = list(keys)
        if self.keys:
            message = f"{message} (offending keys: {', '.join(self.keys)})"
        super().__init__(message)


class PixelOutOfRangeError(GsdfError, ValueError):
    """Pixel coordinate outside the image."""


class NonFiniteInputError(GsdfError, ValueError):
    """NaN or infinite value where a finite one is required."""


class ShapeMismatchError(GsdfError, ValueError):
    """Buffers or arrays with incompatible shapes."""


class SamplingError(GsdfError, ValueError):
    """Ray sampling request that cannot be satisfied."""


class StaleContextError(GsdfError):
    """Backward pass requested on a forward context that no longer matches."""


class DensityControlError(GsdfError):
    """Density control invoked before enough statistics were accumulated."""


class TrainingDivergedError(GsdfError):
    """Loss became non-finite during training."""


class EmptyPointSetError(GsdfError, ValueError):
    """Point set with no points where at least one is required."""
