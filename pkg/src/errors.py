"""Every error the engine raises on purpose lives here.

The CLI maps these onto exit codes, so keep the hierarchy flat and boring.
"""


class NcaError(Exception):
    """Base class for all engine errors."""


class ShapeError(NcaError, ValueError):
    """Two tensors (or a tensor and a parameter) disagree on a dimension."""

    def __init__(self, message: str, dimension: str | None = None,
                 expected=None, actual=None):
        super().__init__(message)
        self.dimension = dimension
        self.expected = expected
        self.actual = actual


class TapeError(NcaError, RuntimeError):
    """Backward called without a tape, on a non-scalar, or twice on one tape."""


class ConfigError(NcaError, ValueError):
    """Bad or unknown configuration value."""


class DatasetError(NcaError, OSError):
    """Something about the images, masks or manifest on disk is wrong."""


class CheckpointError(NcaError, ValueError):
    """Checkpoint bytes could not be trusted (magic, version, CRC, length)."""


class LossError(NcaError, ValueError):
    """Loss called with inputs it can't make sense of."""


class NumericalError(NcaError, ArithmeticError):
    """Loss went NaN/Inf. Carries where it happened and the parameter norms."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None,
                 parameter_norms: dict[str, float] | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.parameter_norms = parameter_norms or {}

    def diagnostic(self) -> str:
        # Worst offenders first, that's usually what you want to see.
        worst = sorted(self.parameter_norms.items(), key=lambda kv: -_sortable(kv[1]))[:5]
        norms = ", ".join(f"{name}={value:.4g}" for name, value in worst)
        return f"{self} (epoch={self.epoch}, batch={self.batch}; largest norms: {norms or 'n/a'})"


def _sortable(value: float) -> float:
    # NaN norms sort as "largest" so they show up in the diagnostic.
    return float("inf") if value != value else value
