"""Raster and label map types plus image decode/encode, resizing and normalization.

All pixel data is RGB, height x width x channels, real valued. Quantization to
8 bits happens only in ``save_image``.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.colors import ListedColormap, to_rgb
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

from models.errors import ImageDecodeError, ImageEncodeError, ShapeMismatchError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LAND = 0
WATER = 1

# Two-colour palette for segmented images, indexed by category
LABEL_PALETTE = ListedColormap(["#9bb068", "#2f6db3"], name="land_water")

_DECODABLE_FORMATS = {"PNG", "JPEG", "MPO"}
_RESIZE_METHODS = ("nearest", "bilinear")


@dataclass(frozen=True)
class Raster:
    """Immutable H x W x C grid of real pixel values"""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeMismatchError(f"raster data must be H x W x C, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeMismatchError(f"raster dimensions must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster contains NaN or infinite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def astype(self, dtype) -> "Raster":
        return Raster(self.data.astype(dtype))


@dataclass(frozen=True)
class LabelMap:
    """H x W grid of category indices in [0, num_categories)"""

    labels: np.ndarray
    num_categories: int = 2

    def __post_init__(self):
        arr = np.array(self.labels, copy=True)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise ShapeMismatchError(f"label map must be a non-empty H x W grid, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError("label map entries must be integers")
            arr = arr.astype(np.int64)
        if self.num_categories < 1:
            raise ValueError("num_categories must be positive")
        if arr.min() < 0 or arr.max() >= self.num_categories:
            raise ValueError(
                f"labels must lie in [0, {self.num_categories}), found range [{arr.min()}, {arr.max()}]"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def histogram(self) -> list:
        """Pixel count per category"""
        return np.bincount(self.labels.ravel(), minlength=self.num_categories).tolist()


def load_image(path: PathLike) -> Raster:
    """
    Decode a PNG or JPEG file into a 3-channel raster scaled to [0, 1]

    Args:
        path: Image file location

    Returns:
        Raster with alpha dropped and grayscale replicated to RGB
    """
    path = Path(path)
    if not path.is_file():
        raise ImageDecodeError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in _DECODABLE_FORMATS:
                raise ImageDecodeError(f"unsupported image format {im.format!r} in {path}")
            if im.width == 0 or im.height == 0:
                raise ImageDecodeError(f"zero-dimension image: {path}")
            if im.mode in ("I;16", "I;16B", "I"):
                scale = 65535.0
                arr = np.asarray(im, dtype=np.float64)
                arr = np.repeat(arr[:, :, None], 3, axis=2)
            else:
                scale = 255.0
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    logger.debug("Loaded %s (%dx%d)", path, arr.shape[1], arr.shape[0])
    return Raster((arr / scale).astype(np.float32))


def save_image(raster: Raster, path: PathLike) -> None:
    """
    Quantize a raster to 8 bits and write it; PNG unless the suffix says JPEG

    Args:
        raster: Raster with 1 or 3 channels; values are clamped to [0, 1]
        path: Destination file
    """
    if raster.channels not in (1, 3):
        raise ImageEncodeError(f"cannot save a raster with {raster.channels} channels (expected 1 or 3)")
    path = Path(path)
    quantized = np.rint(np.clip(raster.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if raster.channels == 1:
        image = Image.fromarray(quantized[:, :, 0], mode="L")
    else:
        image = Image.fromarray(quantized, mode="RGB")
    fmt = "JPEG" if path.suffix.lower() in (".jpg", ".jpeg") else "PNG"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        image.save(path, format=fmt)
    except OSError as exc:
        raise ImageEncodeError(f"cannot write {path}: {exc}") from exc


def resize(raster: Raster, new_height: int, new_width: int, method: str = "bilinear") -> Raster:
    """
    Resample a raster to new dimensions.

    Bilinear sampling uses half-pixel centres with edge clamping; nearest
    picks floor(dst * in / out).
    """
    if new_height < 1 or new_width < 1:
        raise ValueError(f"target dimensions must be >= 1, got {new_height}x{new_width}")
    if method not in _RESIZE_METHODS:
        raise ValueError(f"unknown resize method {method!r}; expected one of {_RESIZE_METHODS}")
    if (new_height, new_width) == (raster.height, raster.width):
        return raster

    tensor = torch.from_numpy(np.array(raster.data.transpose(2, 0, 1), copy=True))[None]
    with torch.no_grad():
        if method == "bilinear":
            out = F.interpolate(tensor, size=(new_height, new_width), mode="bilinear", align_corners=False)
        else:
            out = F.interpolate(tensor, size=(new_height, new_width), mode="nearest")
    return Raster(out[0].numpy().transpose(1, 2, 0))


def _check_channel_vectors(raster: Raster, mean: Sequence[float], std: Sequence[float]):
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (raster.channels,) or std.shape != (raster.channels,):
        raise ShapeMismatchError(
            f"mean/std lengths ({mean.size}, {std.size}) must equal channel count {raster.channels}"
        )
    if np.any(std <= 0):
        raise ValueError("std entries must be positive")
    return mean, std


def normalize(raster: Raster, per_channel_mean: Sequence[float], per_channel_std: Sequence[float]) -> Raster:
    """out[p, c] = (in[p, c] - mean[c]) / std[c]"""
    mean, std = _check_channel_vectors(raster, per_channel_mean, per_channel_std)
    return Raster(((raster.data - mean) / std).astype(raster.data.dtype))


def denormalize(raster: Raster, per_channel_mean: Sequence[float], per_channel_std: Sequence[float]) -> Raster:
    """Inverse of ``normalize`` for the same mean/std"""
    mean, std = _check_channel_vectors(raster, per_channel_mean, per_channel_std)
    return Raster((raster.data * std + mean).astype(raster.data.dtype))


def window_features(pixels: np.ndarray, window: int) -> np.ndarray:
    """
    Flatten the reflect-padded window x window neighbourhood of every pixel.

    Args:
        pixels: H x W x C array
        window: Odd neighbourhood size

    Returns:
        (H * W) x (C * window^2) matrix, rows in row-major pixel order, each
        row laid out as (dy, dx, channel)
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd positive integer, got {window}")
    height, width, channels = pixels.shape
    pad = window // 2
    padded = np.pad(pixels, ((pad, pad), (pad, pad), (0, 0)), mode="reflect") if pad else pixels
    # (H, W, C, win, win) -> (H, W, win, win, C)
    views = sliding_window_view(padded, (window, window), axis=(0, 1))
    return views.transpose(0, 1, 3, 4, 2).reshape(height * width, channels * window * window)


def colorize_labels(labels: LabelMap) -> Raster:
    """Render a label map with the land/water palette"""
    colors = np.array([to_rgb(c) for c in LABEL_PALETTE.colors])
    if labels.num_categories > len(colors):
        raise ValueError(f"palette covers {len(colors)} categories, label map has {labels.num_categories}")
    return Raster(colors[labels.labels])


def labels_from_colors(raster: Raster) -> LabelMap:
    """Inverse of ``colorize_labels``: nearest palette colour per pixel"""
    if raster.channels != 3:
        raise ShapeMismatchError(f"label image needs 3 channels, got {raster.channels}")
    colors = np.array([to_rgb(c) for c in LABEL_PALETTE.colors])
    distances = ((raster.data[:, :, None, :] - colors[None, None]) ** 2).sum(axis=-1)
    return LabelMap(distances.argmin(axis=-1), num_categories=len(colors))
