"""Neural style transfer: Gram statistics, content/style losses, pixel gradients and the optimization loop."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from models.errors import NonFiniteLossError, ShapeMismatchError
from models.logging_utils import progress_enabled
from models.raster import Raster, resize
from models.vgg_features import POOLS_BEFORE, LayerSelection, VggFeatureExtractor, preprocess, unpreprocess

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

OPTIMIZERS = ("adam", "plain-gd")
INITS = ("content", "noise")


@dataclass
class ContentTarget:
    """Flattened feature grid P (N_l x M_l) of the content image at one layer"""

    layer: str
    features: np.ndarray
    shape: Tuple[int, int, int]

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("content target contains non-finite values")


@dataclass
class StyleLayerTarget:
    gram: np.ndarray
    channels: int
    positions: int


@dataclass
class StyleTargets:
    """Gram matrix A^l with N_l and M_l for every style layer"""

    layers: Dict[str, StyleLayerTarget] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, target in self.layers.items():
            out[f"{name}.gram"] = target.gram
            out[f"{name}.dims"] = np.array([target.channels, target.positions], dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], layer_names: List[str]) -> "StyleTargets":
        layers = {}
        for name in layer_names:
            gram = np.asarray(arrays[f"{name}.gram"])
            channels, positions = (int(v) for v in arrays[f"{name}.dims"])
            if gram.shape != (channels, channels):
                raise ShapeMismatchError(f"{name}: Gram shape {gram.shape} does not match N={channels}")
            layers[name] = StyleLayerTarget(gram, channels, positions)
        return cls(layers)


@dataclass
class NstConfig:
    alpha: float = 1.0
    beta: float = 1000.0
    selection: LayerSelection = field(default_factory=LayerSelection)
    iterations: int = 500
    step_size: float = 2.0
    optimizer: str = "adam"
    init: str = "content"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clamp_every_step: bool = False
    pooling: str = "avg"
    log_every: int = 50

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be positive")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.pooling not in ("avg", "max"):
            raise ValueError(f"pooling must be 'avg' or 'max', got {self.pooling!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class OptimizationTrace:
    """Loss components recorded once per iteration"""

    records: List[Dict[str, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> Dict[str, float]:
        return self.records[index]

    def append(self, iteration: int, total: float, content: float, style: float) -> None:
        self.records.append({"iter": iteration, "total": total, "content": content, "style": style})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=["iter", "total", "content", "style"])

    def to_jsonl(self, path: PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(record) for record in self.records]
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, path: PathLike) -> "OptimizationTrace":
        frame = pd.read_json(path, lines=True)
        trace = cls()
        for row in frame.itertuples(index=False):
            trace.append(int(row.iter), float(row.total), float(row.content), float(row.style))
        return trace


def min_content_size(selection: LayerSelection) -> int:
    """Smallest content side for which the deepest selected layer is still at least 2x2 (32 for the defaults)"""
    return 2 ** (max(POOLS_BEFORE[name] for name in selection.layers()) + 1)


def gram(features: np.ndarray) -> np.ndarray:
    """G = F F^T over flattened spatial positions; exactly symmetric"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or min(features.shape) < 1:
        raise ShapeMismatchError(f"gram needs a non-empty N x M matrix, got shape {features.shape}")
    g = features @ features.T
    upper = np.triu(g)
    return upper + np.triu(g, 1).T


def content_loss(features: np.ndarray, target: Union[ContentTarget, np.ndarray]) -> float:
    """1/2 * sum (F - P)^2"""
    p = target.features if isinstance(target, ContentTarget) else np.asarray(target)
    features = np.asarray(features, dtype=np.float64)
    if features.shape != p.shape:
        raise ShapeMismatchError(f"content features {features.shape} vs target {p.shape}")
    return float(0.5 * np.sum((features - p) ** 2))


def style_layer_loss(g: np.ndarray, a: np.ndarray, n: int, m: int) -> float:
    """1 / (4 N^2 M^2) * sum (G - A)^2"""
    g = np.asarray(g, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if g.shape != a.shape or g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeMismatchError(f"Gram matrices must share a square shape, got {g.shape} and {a.shape}")
    if m < 1:
        raise ValueError(f"M must be >= 1, got {m}")
    return float(np.sum((g - a) ** 2) / (4.0 * n * n * m * m))


def _flatten(activation: np.ndarray) -> np.ndarray:
    return np.asarray(activation, dtype=np.float64).reshape(activation.shape[0], -1)


def build_content_target(extractor: VggFeatureExtractor, content: Raster, layer: str) -> ContentTarget:
    """``content`` must already be preprocessed"""
    activation = extractor.forward_features(content, [layer])[layer]
    return ContentTarget(layer, _flatten(activation), tuple(activation.shape))


def build_style_targets(extractor: VggFeatureExtractor, style: Raster, selection: LayerSelection) -> StyleTargets:
    """``style`` must already be preprocessed"""
    activations = extractor.forward_features(style, selection.style_layers)
    targets = {}
    for name in selection.style_layers:
        flat = _flatten(activations[name])
        targets[name] = StyleLayerTarget(gram(flat), flat.shape[0], flat.shape[1])
    return StyleTargets(targets)


def _evaluate(activations: Dict[str, np.ndarray], content_target: ContentTarget, style_targets: StyleTargets,
              cfg: NstConfig, with_grads: bool):
    upstream: Dict[str, np.ndarray] = {}

    def add(name: str, grad: np.ndarray):
        upstream[name] = upstream[name] + grad if name in upstream else grad

    act = activations[content_target.layer]
    if act.shape != content_target.shape:
        raise ShapeMismatchError(f"content layer {content_target.layer}: {act.shape} vs target {content_target.shape}")
    f = _flatten(act)
    c_loss = content_loss(f, content_target)
    if with_grads and cfg.alpha > 0:
        add(content_target.layer, (cfg.alpha * (f - content_target.features)).reshape(act.shape))

    s_loss = 0.0
    for name, weight in cfg.selection.style_weights().items():
        target = style_targets.layers[name]
        act = activations[name]
        f = _flatten(act)
        if f.shape != (target.channels, target.positions):
            raise ShapeMismatchError(f"style layer {name}: {f.shape} vs target ({target.channels}, {target.positions})")
        g = gram(f)
        s_loss += weight * style_layer_loss(g, target.gram, target.channels, target.positions)
        if with_grads and cfg.beta > 0:
            scale = cfg.beta * weight / (target.channels ** 2 * target.positions ** 2)
            add(name, (scale * ((g - target.gram) @ f)).reshape(act.shape))

    total = cfg.alpha * c_loss + cfg.beta * s_loss
    return (total, c_loss, s_loss), upstream


def total_loss(image: Raster, content_target: ContentTarget, style_targets: StyleTargets, cfg: NstConfig,
               extractor: VggFeatureExtractor) -> Tuple[float, float, float]:
    """
    Weighted objective alpha * content + beta * sum_l w_l E_l

    Returns:
        (total, content, style) where style is the weighted sum over layers
    """
    layers = list(dict.fromkeys([content_target.layer, *cfg.selection.style_layers]))
    activations = extractor.forward_features(image, layers)
    losses, _ = _evaluate(activations, content_target, style_targets, cfg, with_grads=False)
    return losses


def loss_and_grad(image: Raster, content_target: ContentTarget, style_targets: StyleTargets, cfg: NstConfig,
                  extractor: VggFeatureExtractor) -> Tuple[Tuple[float, float, float], np.ndarray]:
    """
    Losses plus the gradient of the total w.r.t. every (preprocessed) pixel

    The upstream gradients alpha (F - P) and beta w_l / (N^2 M^2) (G - A) F
    are pushed back through the network in one reverse pass.
    """
    layers = list(dict.fromkeys([content_target.layer, *cfg.selection.style_layers]))
    tape = extractor.record(image, layers)
    losses, upstream = _evaluate(tape.activations(), content_target, style_targets, cfg, with_grads=True)
    if not upstream:
        return losses, np.zeros(image.shape, dtype=np.float64)
    return losses, tape.backward(upstream).astype(np.float64)


class AdamOptimizer:
    """Adaptive-moment steps on a pixel array"""

    def __init__(self, step_size: float, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return x - self.step_size * m_hat / (np.sqrt(v_hat) + self.epsilon)


class GradientDescent:
    def __init__(self, step_size: float):
        self.step_size = step_size

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return x - self.step_size * grad


class StyleTransfer:
    """Iteratively paints a content image in the style of another"""

    def __init__(self, extractor: VggFeatureExtractor):
        self.extractor = extractor

    def _optimizer(self, cfg: NstConfig):
        if cfg.optimizer == "adam":
            return AdamOptimizer(cfg.step_size, cfg.beta1, cfg.beta2, cfg.epsilon)
        return GradientDescent(cfg.step_size)

    def prepare_style(self, style: Raster, height: int, width: int) -> Raster:
        """Resize the style image to the content grid and preprocess it"""
        if style.channels != 3:
            raise ShapeMismatchError(f"style image needs 3 channels, got {style.channels}")
        resized = resize(style, height, width, method="bilinear")
        return preprocess(resized.astype(self.extractor.numpy_dtype), self.extractor.mean_rgb)

    def style_targets(self, style: Raster, height: int, width: int, cfg: NstConfig) -> StyleTargets:
        return build_style_targets(self.extractor, self.prepare_style(style, height, width), cfg.selection)

    def stylize(self, content: Raster, style: Raster, cfg: NstConfig,
                style_targets: Optional[StyleTargets] = None,
                label: str = "stylize") -> Tuple[Raster, OptimizationTrace]:
        """
        Optimize an image to match the content features of ``content`` and the
        Gram statistics of ``style``

        Args:
            content: RGB content raster in [0, 1]
            style: RGB style raster in [0, 1]; resized to the content grid
            cfg: Loss weights, layers and optimizer settings
            style_targets: Precomputed targets (e.g. from the cache); built from ``style`` if omitted
            label: Name used in progress output

        Returns:
            Stylized raster clamped to [0, 1] and the per-iteration trace
        """
        if content.channels != 3:
            raise ShapeMismatchError(f"content image needs 3 channels, got {content.channels}")
        minimum = min_content_size(cfg.selection)
        if content.height < minimum or content.width < minimum:
            raise ShapeMismatchError(
                f"degenerate dims: content {content.height}x{content.width} is below {minimum}x{minimum}, "
                f"the size at which every selected layer keeps at least a 2x2 grid"
            )
        mean = np.asarray(self.extractor.mean_rgb, dtype=np.float64)
        content_pre = preprocess(content.astype(self.extractor.numpy_dtype), self.extractor.mean_rgb)
        content_target = build_content_target(self.extractor, content_pre, cfg.selection.content_layer)
        if style_targets is None:
            style_targets = self.style_targets(style, content.height, content.width, cfg)

        if cfg.init == "content":
            x = np.array(content_pre.data, dtype=np.float64)
        else:
            rng = np.random.default_rng(cfg.seed)
            x = rng.uniform(0.0, 1.0, size=content.shape) * 255.0 - mean

        optimizer = self._optimizer(cfg)
        trace = OptimizationTrace()
        iterations = tqdm(range(cfg.iterations), desc=label, disable=not progress_enabled(logger))
        for i in iterations:
            image = Raster(x.astype(self.extractor.numpy_dtype))
            (total, c_loss, s_loss), grad = loss_and_grad(image, content_target, style_targets, cfg, self.extractor)
            if not all(np.isfinite(v) for v in (total, c_loss, s_loss)) or not np.all(np.isfinite(grad)):
                raise NonFiniteLossError(i, {"total": total, "content": c_loss, "style": s_loss})
            trace.append(i, total, c_loss, s_loss)
            if cfg.log_every and i % cfg.log_every == 0:
                logger.info("%s iter %d: total %.4g content %.4g style %.4g", label, i, total, c_loss, s_loss)
            x = optimizer.step(x, grad)
            if cfg.clamp_every_step:
                x = np.clip(x, -mean, 255.0 - mean)

        result = unpreprocess(Raster(x), self.extractor.mean_rgb)
        return Raster(np.clip(result.data, 0.0, 1.0)), trace
