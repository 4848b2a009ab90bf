"""Exception hierarchy shared across the package."""


class TextOVSRError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TextOVSRError, ValueError):
    """Invalid or incomplete configuration (ranges, variants, noise bank...)."""


class RangeError(TextOVSRError, ValueError):
    """A scalar falls outside its configured range."""


class ShapeError(TextOVSRError, ValueError):
    """Tensor or clip geometry does not satisfy a contract."""


class DegenerateSizeError(ShapeError):
    """A resize would shrink a frame below the minimum supported size."""


class NumericError(TextOVSRError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class CaptionError(TextOVSRError, RuntimeError):
    """A caption provider failed for a specific frame."""

    def __init__(self, frame_index, message):
        super().__init__(f"captioning failed at frame {frame_index}: {message}")
        self.frame_index = frame_index


class ContractError(TextOVSRError, ValueError):
    """Required inputs missing (e.g. prompt embeddings for every frame)."""


class DatasetError(TextOVSRError, ValueError):
    """Malformed dataset layout or misaligned clips."""


class LineageError(TextOVSRError, RuntimeError):
    """Checkpoint lineage is missing or inconsistent."""


class TrainingError(TextOVSRError, RuntimeError):
    """Optimization diverged (NaN/inf loss)."""

    def __init__(self, iteration, message):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class VersioningError(TextOVSRError, ValueError):
    """A versioned file has an unexpected version or content hash."""
