"""End-to-end run: segment, stylize once per category, compose, report."""

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from models import __version__
from models.collage import CollageInput, compose, feathered_compose
from models.config import PipelineConfig
from models.errors import StageError
from models.mlp_segmenter import load_params, majority_filter, segment
from models.nst_engine import NstConfig, OptimizationTrace, StyleTargets, StyleTransfer, build_style_targets
from models.raster import LabelMap, Raster, colorize_labels, load_image, save_image
from models.report_generator import RunReportPDF
from models.vgg_features import LayerSelection, VggFeatureExtractor, load_vgg_weights

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PARTIAL_MARKER = ".partial"
CATEGORY_NAMES = ("land", "water")


class StyleTargetCache:
    """
    On-disk store of style Gram targets keyed by a content hash of everything
    they depend on: style pixels, layer selection, target size and weights.
    """

    def __init__(self, directory: PathLike, transfer: StyleTransfer, weights_checksum: str):
        self.directory = Path(directory)
        self.transfer = transfer
        self.weights_checksum = weights_checksum
        self.hits = 0
        self.misses = 0
        self._counter_lock = threading.Lock()

    def key(self, style_image: Raster, selection: LayerSelection, dims: Tuple[int, int]) -> str:
        digest = hashlib.sha256()
        pixels = np.ascontiguousarray(style_image.data, dtype=np.float32)
        digest.update(repr(pixels.shape).encode())
        digest.update(pixels.tobytes())
        digest.update(json.dumps({
            "content_layer": selection.content_layer,
            "style_weights": selection.style_weights(),
            "dims": list(dims),
            "pooling": self.transfer.extractor.pooling,
            "weights": self.weights_checksum,
        }, sort_keys=True).encode())
        return digest.hexdigest()

    def path_for(self, key: str) -> Path:
        return self.directory / f"{key}.npz"

    def _read(self, path: Path, selection: LayerSelection) -> StyleTargets:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: np.array(archive[name]) for name in archive.files}
        return StyleTargets.from_arrays(arrays, selection.style_layers)

    def _write(self, path: Path, targets: StyleTargets) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        # one temp file per writer; concurrent writers of a key race only on the final rename
        with tempfile.NamedTemporaryFile(dir=self.directory, prefix=f"{path.stem}.", suffix=".tmp",
                                         delete=False) as fh:
            np.savez(fh, **targets.to_arrays())
        try:
            os.replace(fh.name, path)
        except OSError:
            Path(fh.name).unlink(missing_ok=True)
            raise

    def cache_style_targets(self, style_image: Raster, selection: LayerSelection,
                            dims: Tuple[int, int]) -> StyleTargets:
        """
        Gram targets of ``style_image`` resized to ``dims``, read from the cache when possible

        Args:
            style_image: RGB style raster in [0, 1]
            selection: Style layers and weights
            dims: (height, width) of the content grid

        Returns:
            StyleTargets; a corrupt cache entry is recomputed and overwritten
        """
        key = self.key(style_image, selection, dims)
        path = self.path_for(key)
        if path.is_file():
            try:
                targets = self._read(path, selection)
                with self._counter_lock:
                    self.hits += 1
                logger.debug("Style target cache hit %s", key[:12])
                return targets
            except Exception as exc:
                logger.warning("Discarding corrupt style cache entry %s: %s", path, exc)

        height, width = dims
        prepared = self.transfer.prepare_style(style_image, height, width)
        targets = build_style_targets(self.transfer.extractor, prepared, selection)
        self._write(path, targets)
        with self._counter_lock:
            self.misses += 1
        return targets


@dataclass
class RunReport:
    stages: List[Dict[str, Any]] = field(default_factory=list)
    histogram: List[int] = field(default_factory=list)
    final_losses: Dict[str, Optional[Dict[str, float]]] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    version: str = __version__
    # In-memory results, not serialized
    collage: Optional[Raster] = field(default=None, repr=False, compare=False)
    stylized: List[Raster] = field(default_factory=list, repr=False, compare=False)
    traces: List[OptimizationTrace] = field(default_factory=list, repr=False, compare=False)

    def stage_names(self) -> List[str]:
        return [s["name"] for s in self.stages]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "stages": self.stages,
            "histogram": self.histogram,
            "final_losses": self.final_losses,
            "artifacts": self.artifacts,
            "config": self.config,
        }

    def to_json(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def from_json(cls, path: PathLike) -> "RunReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            stages=data["stages"],
            histogram=data["histogram"],
            final_losses=data["final_losses"],
            artifacts=data["artifacts"],
            config=data["config"],
            version=data["version"],
        )


class PipelineRunner:
    """Runs the whole segment -> stylize -> collage chain for one configuration"""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.output_dir = Path(cfg.output_dir)
        self.report = RunReport(config=cfg.to_dict())

    @contextmanager
    def _stage(self, name: str) -> Iterator[None]:
        logger.info("Stage %s started", name)
        start = time.perf_counter()
        try:
            yield
        except Exception as exc:
            (self.output_dir / PARTIAL_MARKER).write_text(f"failed in stage {name}: {exc}\n", encoding="utf-8")
            logger.error("Stage %s failed: %s", name, exc)
            raise StageError(name, exc) from exc
        elapsed = time.perf_counter() - start
        self.report.stages.append({"name": name, "seconds": round(elapsed, 4)})
        logger.info("Stage %s finished in %.2fs", name, elapsed)

    def _artifact(self, key: str, filename: str) -> Path:
        path = self.output_dir / filename
        self.report.artifacts[key] = str(path)
        return path

    def _stylize_category(self, transfer: StyleTransfer, cache: Optional[StyleTargetCache], content: Raster,
                          style: Raster, category: int) -> Tuple[Raster, OptimizationTrace]:
        nst_cfg: NstConfig = dataclasses.replace(self.cfg.nst, seed=self.cfg.stage_seed("stylize", category))
        targets = None
        if cache is not None:
            targets = cache.cache_style_targets(style, nst_cfg.selection, (content.height, content.width))
        return transfer.stylize(content, style, nst_cfg, style_targets=targets,
                                label=f"stylize[{CATEGORY_NAMES[category]}]")

    def _stylize_all(self, transfer: StyleTransfer, cache: Optional[StyleTargetCache], content: Raster,
                     styles: List[Raster], labels: LabelMap) -> Tuple[List[Raster], List[OptimizationTrace]]:
        present = [count > 0 for count in labels.histogram()]
        jobs = [k for k, is_present in enumerate(present) if is_present]
        for k, is_present in enumerate(present):
            if not is_present:
                logger.warning("No %s pixels in the label map; using the content image for category %d",
                               CATEGORY_NAMES[k], k)

        def job(k: int):
            return self._stylize_category(transfer, cache, content, styles[k], k)

        if self.cfg.single_thread or len(jobs) < 2:
            results = [job(k) for k in jobs]
        else:
            with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
                results = list(pool.map(job, jobs))

        by_category = dict(zip(jobs, results))
        stylized, traces = [], []
        for k in range(labels.num_categories):
            raster, trace = by_category.get(k, (content, OptimizationTrace()))
            stylized.append(raster)
            traces.append(trace)
        return stylized, traces

    def run(self) -> RunReport:
        """
        Execute every stage and write the artifacts to ``output_dir``

        Returns:
            RunReport, also written as ``report.json``
        """
        cfg = self.cfg
        self.output_dir.mkdir(parents=True, exist_ok=True)
        marker = self.output_dir / PARTIAL_MARKER
        if marker.exists():
            marker.unlink()

        previous_threads = torch.get_num_threads()
        if cfg.single_thread:
            torch.set_num_threads(1)
        try:
            return self._run_stages()
        finally:
            torch.set_num_threads(previous_threads)

    def _run_stages(self) -> RunReport:
        cfg = self.cfg
        with self._stage("load"):
            content = load_image(cfg.content_image)
            styles = [load_image(p) for p in cfg.style_images]
            params = load_params(cfg.model)
            weights = load_vgg_weights(cfg.vgg_weights, cfg.vgg_checksum)
            transfer = StyleTransfer(VggFeatureExtractor(weights, pooling=cfg.nst.pooling))
            cache = None
            if cfg.cache.enabled:
                cache = StyleTargetCache(cfg.cache.dir, transfer, cfg.vgg_checksum)

        with self._stage("segment"):
            labels = segment(params, content, cfg.segmentation.window, workers=cfg.segmentation.workers)

        if cfg.segmentation.majority_filter_radius > 0:
            with self._stage("majority_filter"):
                labels = majority_filter(labels, cfg.segmentation.majority_filter_radius)

        with self._stage("write_labels"):
            save_image(colorize_labels(labels), self._artifact("labels", "labels.png"))
            self.report.histogram = labels.histogram()
            logger.info("Label histogram (land, water): %s", self.report.histogram)

        with self._stage("stylize"):
            stylized, traces = self._stylize_all(transfer, cache, content, styles, labels)
            for k, (raster, trace) in enumerate(zip(stylized, traces)):
                save_image(raster, self._artifact(f"stylized_{k}", f"stylized_{k}.png"))
                trace.to_jsonl(self._artifact(f"trace_{k}", f"trace_{k}.jsonl"))
                last = trace[-1] if len(trace) else None
                self.report.final_losses[str(k)] = (
                    {key: last[key] for key in ("total", "content", "style")} if last else None
                )
            self.report.stylized = stylized
            self.report.traces = traces

        with self._stage("compose"):
            collage_input = CollageInput(labels, stylized)
            if cfg.compositing.mode == "feather":
                collage = feathered_compose(collage_input, cfg.compositing.feather_radius)
            else:
                collage = compose(collage_input)
            save_image(collage, self._artifact("collage", "collage.png"))
            self.report.collage = collage

        report_path = self._artifact("report", "report.json")
        if cfg.report.pdf_report:
            with self._stage("pdf_report"):
                pdf_path = self._artifact("pdf_report", "report.pdf")
                RunReportPDF().generate(self.report, pdf_path)

        self.report.to_json(report_path)
        logger.info("Run finished; artifacts in %s", self.output_dir)
        return self.report


def run(cfg: PipelineConfig) -> RunReport:
    return PipelineRunner(cfg).run()
