"""EuroSAT download, land/water category mapping and per-pixel sample extraction."""

import logging
import math
import struct
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import requests
from tqdm import tqdm

from models.checksums import verify_checksum
from models.errors import ChecksumMismatchError, DatasetError, ShapeMismatchError, UnknownCategoryError
from models.logging_utils import progress_enabled
from models.raster import LAND, WATER, load_image, window_features

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

EUROSAT_RGB_URL = "https://madm.dfki.de/files/sentinel/EuroSAT.zip"
EUROSAT_CATEGORIES = (
    "AnnualCrop",
    "Forest",
    "HerbaceousVegetation",
    "Highway",
    "Industrial",
    "Pasture",
    "PermanentCrop",
    "Residential",
    "River",
    "SeaLake",
)
PATCH_SIZE = 64

SAMPLE_SET_MAGIC = b"ARTMAPSS"
SAMPLE_SET_VERSION = 1
_SAMPLE_HEADER = struct.Struct("<8sHIH")

_CHUNK_SIZE = 1 << 20


class BinaryCategoryMap:
    """Maps EuroSAT scene categories onto the land/water scheme"""

    def __init__(self, water_categories: Sequence[str] = ("SeaLake", "River")):
        unknown = [name for name in water_categories if name not in EUROSAT_CATEGORIES]
        if unknown:
            raise UnknownCategoryError(f"not EuroSAT categories: {', '.join(unknown)}")
        self.mapping: Dict[str, int] = {
            name: WATER if name in water_categories else LAND for name in EUROSAT_CATEGORIES
        }
        if len(set(self.mapping.values())) != 2:
            raise ValueError("category map must split the categories into two nonempty groups")

    def __call__(self, name: str) -> int:
        try:
            return self.mapping[name]
        except KeyError:
            raise UnknownCategoryError(f"unknown EuroSAT category {name!r}") from None

    def groups(self) -> Dict[int, List[str]]:
        out: Dict[int, List[str]] = {LAND: [], WATER: []}
        for name, label in self.mapping.items():
            out[label].append(name)
        return out


DEFAULT_CATEGORY_MAP = BinaryCategoryMap()


def map_category(name: str, category_map: BinaryCategoryMap = DEFAULT_CATEGORY_MAP) -> int:
    """Return 1 for water-dominated scene categories, 0 for land"""
    return category_map(name)


@dataclass
class DatasetManifest:
    """Patch files of an unpacked EuroSAT archive grouped by category"""

    root: Path
    entries: List[Tuple[Path, str]] = field(default_factory=list)

    def __post_init__(self):
        for _, category in self.entries:
            if category not in EUROSAT_CATEGORIES:
                raise UnknownCategoryError(f"unknown EuroSAT category {category!r}")

    @property
    def total_count(self) -> int:
        return len(self.entries)

    def categories(self) -> List[str]:
        return sorted({category for _, category in self.entries})

    def subset(self, categories: Sequence[str], per_category: Optional[int] = None) -> "DatasetManifest":
        """Keep only the listed categories, optionally the first N patches of each"""
        kept: List[Tuple[Path, str]] = []
        counts: Dict[str, int] = {}
        for path, category in self.entries:
            if category not in categories:
                continue
            if per_category is not None and counts.get(category, 0) >= per_category:
                continue
            counts[category] = counts.get(category, 0) + 1
            kept.append((path, category))
        return DatasetManifest(root=self.root, entries=kept)

    def verify(self) -> None:
        """Decode every patch and check it is a 64x64 RGB image"""
        for path, _ in self.entries:
            _load_patch(path)


@dataclass
class SampleSet:
    """N per-pixel feature vectors with binary labels"""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.features.ndim != 2:
            raise ShapeMismatchError(f"features must be N x D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeMismatchError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices: np.ndarray) -> "SampleSet":
        return SampleSet(self.features[indices], self.labels[indices])


def _download(url: str, target: Path) -> None:
    logger.info("Downloading %s to %s", url, target)
    partial = target.with_suffix(target.suffix + ".download")
    try:
        with requests.get(url, stream=True, timeout=60) as response:
            response.raise_for_status()
            total = int(response.headers.get("content-length", 0)) or None
            with open(partial, "wb") as f, tqdm(
                total=total, unit="B", unit_scale=True, desc=target.name,
                disable=not progress_enabled(logger),
            ) as bar:
                for chunk in response.iter_content(chunk_size=_CHUNK_SIZE):
                    if chunk:
                        f.write(chunk)
                        bar.update(len(chunk))
    except requests.RequestException as exc:
        partial.unlink(missing_ok=True)
        raise DatasetError(f"download of {url} failed: {exc}") from exc
    partial.replace(target)


def _find_category_dirs(root: Path) -> Dict[str, Path]:
    found: Dict[str, Path] = {}
    for path in sorted(root.rglob("*")):
        if path.is_dir() and path.name in EUROSAT_CATEGORIES and path.name not in found:
            found[path.name] = path
    return found


def build_manifest(root: PathLike) -> DatasetManifest:
    """Enumerate the patches below an unpacked archive, sorted by category then file name"""
    root = Path(root)
    category_dirs = _find_category_dirs(root)
    entries: List[Tuple[Path, str]] = []
    for category in EUROSAT_CATEGORIES:
        directory = category_dirs.get(category)
        if directory is None:
            continue
        for patch in sorted(directory.iterdir()):
            if patch.suffix.lower() in (".jpg", ".jpeg", ".png"):
                entries.append((patch, category))
    return DatasetManifest(root=root, entries=entries)


def fetch_dataset(source_url: str, dest: PathLike, expected_checksum: str) -> DatasetManifest:
    """
    Download (unless present), verify and unpack the EuroSAT RGB archive

    Args:
        source_url: Archive URL
        dest: Directory receiving the archive and its contents
        expected_checksum: SHA-256 hex digest of the archive

    Returns:
        Manifest of all patches found after unpacking
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    archive = dest / (source_url.rstrip("/").split("/")[-1] or "EuroSAT.zip")

    if archive.exists():
        logger.info("Archive %s already present, skipping download", archive)
        verify_checksum(archive, expected_checksum)
    else:
        _download(source_url, archive)
        try:
            verify_checksum(archive, expected_checksum)
        except ChecksumMismatchError:
            logger.warning("Removing downloaded archive %s: checksum mismatch", archive)
            archive.unlink(missing_ok=True)
            raise

    marker = dest / f".unpacked-{expected_checksum[:16].lower()}"
    if not marker.exists():
        try:
            with zipfile.ZipFile(archive) as zf:
                zf.extractall(dest)
        except zipfile.BadZipFile as exc:
            raise DatasetError(f"malformed archive {archive}: {exc}") from exc
        marker.touch()

    manifest = build_manifest(dest)
    if manifest.total_count == 0:
        raise DatasetError(f"no EuroSAT category directories found under {dest}")
    logger.info("Manifest: %d patches in %d categories", manifest.total_count, len(manifest.categories()))
    return manifest


def _load_patch(path: Path) -> np.ndarray:
    raster = load_image(path)
    if raster.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        raise DatasetError(f"{path} is {raster.shape}, expected a {PATCH_SIZE}x{PATCH_SIZE} RGB patch")
    return raster.data


def _patch_samples(path: Path, category: str, index: int, window: int, cap: int, seed: int,
                   category_map: BinaryCategoryMap) -> Tuple[np.ndarray, np.ndarray]:
    pixels = _load_patch(path)
    num_pixels = pixels.shape[0] * pixels.shape[1]
    rng = np.random.default_rng([seed, index])
    positions = np.sort(rng.choice(num_pixels, size=min(cap, num_pixels), replace=False))
    features = window_features(pixels, window)[positions]
    labels = np.full(len(positions), category_map(category), dtype=np.uint8)
    return features, labels


def extract_pixel_samples(manifest: DatasetManifest, window: int = 3, per_patch_cap: int = 64,
                          seed: int = 0, workers: int = 1,
                          category_map: BinaryCategoryMap = DEFAULT_CATEGORY_MAP) -> SampleSet:
    """
    Sample window-neighbourhood pixel features from every patch.

    Each patch draws up to ``per_patch_cap`` distinct pixel positions from its
    own generator seeded by (seed, patch index), so results do not depend on
    ``workers``. Every sample carries its patch's binary label.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd positive integer, got {window}")
    if not 1 <= per_patch_cap <= PATCH_SIZE * PATCH_SIZE:
        raise ValueError(f"per_patch_cap must lie in [1, {PATCH_SIZE * PATCH_SIZE}], got {per_patch_cap}")
    if manifest.total_count == 0:
        raise DatasetError("cannot extract samples from an empty manifest")

    def job(item):
        index, (path, category) = item
        return _patch_samples(path, category, index, window, per_patch_cap, seed, category_map)

    items = list(enumerate(manifest.entries))
    bar_opts = dict(total=len(items), desc="patches", disable=not progress_enabled(logger))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(job, items), **bar_opts))
    else:
        results = [job(item) for item in tqdm(items, **bar_opts)]

    features = np.concatenate([f for f, _ in results]).astype(np.float32)
    labels = np.concatenate([l for _, l in results])
    logger.info("Extracted %d samples of dimension %d", features.shape[0], features.shape[1])
    return SampleSet(features, labels)


def split_indices(n: int, fractions: Sequence[float], seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded permutation of range(n) cut into train/val/test index arrays"""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive values, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split(samples: SampleSet, fractions: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> Tuple[SampleSet, SampleSet, SampleSet]:
    """Disjoint, exhaustive train/val/test partition; rounding remainder goes to train"""
    train_idx, val_idx, test_idx = split_indices(len(samples), fractions, seed)
    return samples.take(train_idx), samples.take(val_idx), samples.take(test_idx)


def save_sample_set(samples: SampleSet, path: PathLike) -> None:
    """Write the 16-byte header, little-endian float32 features, then one byte per label"""
    if len(samples) >= 2 ** 32 or samples.feature_dim >= 2 ** 16:
        raise ValueError("sample set too large for the container header")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_SAMPLE_HEADER.pack(SAMPLE_SET_MAGIC, SAMPLE_SET_VERSION, len(samples), samples.feature_dim))
        f.write(samples.features.astype("<f4").tobytes(order="C"))
        f.write(samples.labels.astype(np.uint8).tobytes())


def load_sample_set(path: PathLike) -> SampleSet:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _SAMPLE_HEADER.size:
        raise DatasetError(f"{path} is too short to be a sample set")
    magic, version, n, d = _SAMPLE_HEADER.unpack_from(blob)
    if magic != SAMPLE_SET_MAGIC:
        raise DatasetError(f"{path} is not a sample set (magic {magic!r})")
    if version != SAMPLE_SET_VERSION:
        raise DatasetError(f"unsupported sample set version {version} in {path}")
    expected = _SAMPLE_HEADER.size + 4 * n * d + n
    if len(blob) != expected:
        raise DatasetError(f"{path} has {len(blob)} bytes, header implies {expected}")
    offset = _SAMPLE_HEADER.size
    features = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset + 4 * n * d)
    return SampleSet(features.copy(), labels.copy())
