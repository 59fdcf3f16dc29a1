"""Per-pixel assembly of the stylized rasters under the label map."""

from dataclasses import dataclass
from typing import List

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from models.errors import ShapeMismatchError
from models.raster import LabelMap, Raster


@dataclass
class CollageInput:
    """Label map plus one stylized raster per category (index = category)"""

    labels: LabelMap
    stylized: List[Raster]

    def __post_init__(self):
        if len(self.stylized) != self.labels.num_categories:
            raise ShapeMismatchError(
                f"{self.labels.num_categories} categories but {len(self.stylized)} stylized rasters"
            )
        channels = {r.channels for r in self.stylized}
        if len(channels) != 1:
            raise ShapeMismatchError(f"stylized rasters have differing channel counts {sorted(channels)}")
        for k, raster in enumerate(self.stylized):
            if (raster.height, raster.width) != (self.labels.height, self.labels.width):
                raise ShapeMismatchError(
                    f"stylized[{k}] is {raster.height}x{raster.width}, "
                    f"label map is {self.labels.height}x{self.labels.width}"
                )

    def stack(self) -> np.ndarray:
        """K x H x W x C array of the sources"""
        return np.stack([r.data for r in self.stylized])


def compose(collage: CollageInput) -> Raster:
    """out[p, c] = stylized[labels[p]][p, c]; hard selection, no blending"""
    sources = collage.stack()
    labels = collage.labels.labels
    rows, cols = np.indices(labels.shape)
    return Raster(sources[labels, rows, cols])


def blend_weights(labels: LabelMap, radius: int) -> np.ndarray:
    """
    Box-blurred category indicators renormalized per pixel.

    Returns:
        H x W x K weights summing to 1 at every pixel
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    size = 2 * radius + 1
    padded = np.pad(labels.labels, radius, mode="reflect") if radius else labels.labels
    windows = sliding_window_view(padded, (size, size))
    counts = np.stack([(windows == k).sum(axis=(2, 3)) for k in range(labels.num_categories)], axis=-1)
    return counts / counts.sum(axis=-1, keepdims=True)


def feathered_compose(collage: CollageInput, radius: int) -> Raster:
    """Convex blend of the sources with ``blend_weights``; radius 0 is exactly ``compose``"""
    if radius == 0:
        return compose(collage)
    weights = blend_weights(collage.labels, radius)
    sources = collage.stack()
    out = np.zeros(sources.shape[1:], dtype=np.float64)
    for k in range(sources.shape[0]):
        out += weights[:, :, k, None] * sources[k]
    return Raster(out.astype(sources.dtype))
