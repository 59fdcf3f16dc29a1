"""Deterministic sample imagery: a coastal test scene and two procedural style images."""

import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from models.eurosat import SampleSet
from models.raster import LAND, WATER, LabelMap, Raster, save_image, window_features

logger = logging.getLogger(__name__)

SEA_RGB = np.array([0.12, 0.28, 0.45])
SHALLOW_RGB = np.array([0.22, 0.45, 0.55])
GRASS_RGB = np.array([0.36, 0.48, 0.25])
ROCK_RGB = np.array([0.52, 0.47, 0.38])


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled random grid in [0, 1]"""
    grid = rng.random((cells + 1, cells + 1))
    coords = np.linspace(0, cells, size, endpoint=False)
    i0 = np.floor(coords).astype(int)
    t = coords - i0
    top = grid[i0][:, i0] * (1 - t)[None, :] + grid[i0][:, i0 + 1] * t[None, :]
    bottom = grid[i0 + 1][:, i0] * (1 - t)[None, :] + grid[i0 + 1][:, i0 + 1] * t[None, :]
    return top * (1 - t)[:, None] + bottom * t[:, None]


def coastal_scene(size: int = 128, seed: int = 7) -> Tuple[Raster, LabelMap]:
    """
    Sea on the left, land on the right, with a wavy shoreline and an islet

    Returns:
        The RGB scene and its ground-truth land/water map
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi, size=2)
    shore = 0.45 + 0.08 * np.sin(2 * np.pi * 1.5 * yy + phase[0]) + 0.04 * np.sin(2 * np.pi * 4 * yy + phase[1])
    water = xx < shore
    islet = (yy - 0.25) ** 2 + (xx - 0.18) ** 2 < 0.06 ** 2
    water &= ~islet

    relief = _smooth_noise(rng, size, 8)
    land = GRASS_RGB * (1 - relief[..., None]) + ROCK_RGB * relief[..., None]
    depth = np.clip((shore - xx) / 0.15, 0, 1)[..., None]
    sea = SHALLOW_RGB * (1 - depth) + SEA_RGB * depth
    sea = sea + 0.02 * np.sin(2 * np.pi * 24 * (yy + 0.3 * xx))[..., None]

    image = np.where(water[..., None], sea, land)
    image = image + rng.normal(0, 0.015, size=image.shape)
    labels = np.where(water, WATER, LAND)
    return Raster(np.clip(image, 0, 1)), LabelMap(labels)


def brushstroke_style(size: int = 128, seed: int = 11) -> Raster:
    """Warm, diagonal impasto-like strokes"""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    palette = np.array([[0.85, 0.55, 0.20], [0.70, 0.30, 0.15], [0.95, 0.80, 0.40], [0.40, 0.25, 0.10]])
    image = np.zeros((size, size, 3))
    for _ in range(60):
        angle = rng.uniform(np.pi / 6, np.pi / 3)
        cx, cy = rng.random(2)
        along = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        across = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
        mask = (np.abs(along) < rng.uniform(0.1, 0.3)) & (np.abs(across) < rng.uniform(0.01, 0.03))
        image[mask] = palette[rng.integers(len(palette))]
    background = palette[0] * 0.6
    empty = image.sum(axis=-1) == 0
    image[empty] = background
    image += 0.05 * np.sin(2 * np.pi * 40 * (xx + yy))[..., None]
    return Raster(np.clip(image, 0, 1))


def wave_style(size: int = 128, seed: int = 13) -> Raster:
    """Cool swirling bands"""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    centres = rng.random((3, 2))
    field = np.zeros((size, size))
    for cx, cy in centres:
        r = np.hypot(xx - cx, yy - cy)
        theta = np.arctan2(yy - cy, xx - cx)
        field += np.sin(2 * np.pi * 6 * r + 3 * theta)
    t = (field - field.min()) / (np.ptp(field) + 1e-12)
    deep = np.array([0.05, 0.10, 0.35])
    foam = np.array([0.80, 0.90, 0.95])
    image = deep * (1 - t[..., None]) + foam * t[..., None]
    return Raster(np.clip(image, 0, 1))


def scene_samples(window: int = 3, size: int = 64, seeds=(1, 2, 3), per_scene: int = 1500,
                  sample_seed: int = 0) -> SampleSet:
    """Labelled window features drawn from generated scenes, for training small classifiers"""
    rng = np.random.default_rng(sample_seed)
    features, labels = [], []
    for seed in seeds:
        raster, truth = coastal_scene(size, seed)
        feats = window_features(raster.data, window)
        picks = rng.choice(feats.shape[0], size=min(per_scene, feats.shape[0]), replace=False)
        features.append(feats[picks])
        labels.append(truth.labels.ravel()[picks])
    return SampleSet(np.concatenate(features), np.concatenate(labels))


def write_samples(dest: Union[str, Path], size: int = 128) -> Dict[str, Path]:
    """Write the coastal scene and both style images as PNG"""
    dest = Path(dest)
    scene, _ = coastal_scene(size)
    outputs = {
        "content": dest / "coastal.png",
        "land_style": dest / "style_land.png",
        "water_style": dest / "style_water.png",
    }
    save_image(scene, outputs["content"])
    save_image(brushstroke_style(size), outputs["land_style"])
    save_image(wave_style(size), outputs["water_style"])
    logger.info("Wrote sample images to %s", dest)
    return outputs
