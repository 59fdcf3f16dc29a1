"""Exception hierarchy shared by every ArtMap component."""

from typing import Optional


class ArtMapError(Exception):
    """Base class for all errors raised by the pipeline"""


class ImageDecodeError(ArtMapError):
    """Raised when an image file is missing, corrupt or has zero size"""


class ImageEncodeError(ArtMapError):
    """Raised when a raster cannot be written to disk"""


class ShapeMismatchError(ArtMapError, ValueError):
    """Raised when array dimensions do not line up"""


class ChecksumMismatchError(ArtMapError):
    """Raised when a file's digest differs from the expected one"""

    def __init__(self, path: str, expected: str, actual: str):
        super().__init__(f"checksum mismatch for {path}: expected {expected}, got {actual}")
        self.path = path
        self.expected = expected
        self.actual = actual


class DatasetError(ArtMapError):
    """Raised for download failures, malformed archives or empty manifests"""


class UnknownCategoryError(ArtMapError, KeyError):
    """Raised when a scene category is not part of EuroSAT"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown category"


class WeightFileError(ArtMapError):
    """Raised for missing or malformed tensors in a weight container"""


class NonFiniteLossError(ArtMapError):
    """Raised when the style transfer objective diverges"""

    def __init__(self, iteration: int, losses: dict):
        super().__init__(
            f"non-finite loss at iteration {iteration}: "
            + ", ".join(f"{k}={v}" for k, v in losses.items())
        )
        self.iteration = iteration
        self.losses = losses


class ConfigError(ArtMapError):
    """Raised for invalid configuration documents"""

    def __init__(self, message: str, key: Optional[str] = None, location: Optional[str] = None):
        parts = [message]
        if key:
            parts.append(f"key '{key}'")
        if location:
            parts.append(f"at {location}")
        super().__init__(" ".join(parts) if len(parts) == 1 else f"{parts[0]} ({', '.join(parts[1:])})")
        self.key = key
        self.location = location


class StageError(ArtMapError):
    """Raised when a pipeline stage fails; wraps the original error"""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
