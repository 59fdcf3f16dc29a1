"""VGG-19 convolutional feature extractor.

Only the 16 convolutional layers and the 5 pooling stages are kept. Weights
live in a single safetensors file (JSON manifest of name, dtype, shape and
byte offsets, then raw little-endian data) with tensors named
``conv<block>_<index>.weight`` (out x in x 3 x 3) and ``conv<block>_<index>.bias``.
The file metadata records the per-channel RGB means subtracted by ``preprocess``.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save_file

from models.checksums import file_sha256, verify_checksum
from models.errors import ShapeMismatchError, WeightFileError
from models.raster import Raster

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# (name, in_channels, out_channels) per conv layer; None marks a pooling stage
VGG19_LAYOUT: Tuple[Optional[Tuple[str, int, int]], ...] = (
    ("conv1_1", 3, 64), ("conv1_2", 64, 64), None,
    ("conv2_1", 64, 128), ("conv2_2", 128, 128), None,
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256), ("conv3_4", 256, 256), None,
    ("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512), ("conv4_4", 512, 512), None,
    ("conv5_1", 512, 512), ("conv5_2", 512, 512), ("conv5_3", 512, 512), ("conv5_4", 512, 512), None,
)
CONV_LAYERS: Dict[str, Tuple[int, int]] = {entry[0]: (entry[1], entry[2]) for entry in VGG19_LAYOUT if entry}
# pooling stages applied before each conv layer
POOLS_BEFORE: Dict[str, int] = {}
_pools = 0
for _entry in VGG19_LAYOUT:
    if _entry is None:
        _pools += 1
    else:
        POOLS_BEFORE[_entry[0]] = _pools
del _pools, _entry

# ImageNet RGB means on the 0-255 scale
DEFAULT_MEAN_RGB = (123.675, 116.28, 103.53)
IMAGENET_STD_RGB = (0.229, 0.224, 0.225)

# torchvision ``features.N`` index of every conv layer
TORCHVISION_INDEX = {
    "conv1_1": 0, "conv1_2": 2, "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14, "conv3_4": 16,
    "conv4_1": 19, "conv4_2": 21, "conv4_3": 23, "conv4_4": 25,
    "conv5_1": 28, "conv5_2": 30, "conv5_3": 32, "conv5_4": 34,
}


@dataclass
class VggWeights:
    """Kernels and biases for the 16 VGG-19 conv layers"""

    kernels: Dict[str, np.ndarray]
    biases: Dict[str, np.ndarray]
    mean_rgb: Tuple[float, float, float] = DEFAULT_MEAN_RGB

    def __post_init__(self):
        for name, (fan_in, fan_out) in CONV_LAYERS.items():
            if name not in self.kernels or name not in self.biases:
                raise WeightFileError(f"missing tensor {name}")
            if self.kernels[name].shape != (fan_out, fan_in, 3, 3):
                raise WeightFileError(
                    f"{name}: kernel shape {self.kernels[name].shape}, expected {(fan_out, fan_in, 3, 3)}"
                )
            if self.biases[name].shape != (fan_out,):
                raise WeightFileError(f"{name}: bias shape {self.biases[name].shape}, expected ({fan_out},)")
        self.mean_rgb = tuple(float(m) for m in self.mean_rgb)


@dataclass
class LayerSelection:
    """Content layer plus weighted style layers"""

    content_layer: str = "conv4_2"
    style_layers: List[str] = field(
        default_factory=lambda: ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"]
    )
    style_layer_weights: Optional[List[float]] = None

    def __post_init__(self):
        if self.style_layer_weights is None:
            self.style_layer_weights = [1.0 / len(self.style_layers)] * len(self.style_layers)
        for name in [self.content_layer, *self.style_layers]:
            if name not in CONV_LAYERS:
                raise ValueError(f"unknown layer name {name!r}")
        if len(set(self.style_layers)) != len(self.style_layers):
            raise ValueError("style layers must be distinct")
        if len(self.style_layer_weights) != len(self.style_layers):
            raise ValueError(
                f"{len(self.style_layers)} style layers but {len(self.style_layer_weights)} weights"
            )
        if any(w <= 0 for w in self.style_layer_weights):
            raise ValueError("style layer weights must be positive")
        if abs(sum(self.style_layer_weights) - 1.0) > 1e-9:
            raise ValueError(f"style layer weights must sum to 1, got {sum(self.style_layer_weights)}")

    def layers(self) -> List[str]:
        """Every layer needed, content first, without duplicates"""
        return list(dict.fromkeys([self.content_layer, *self.style_layers]))

    def style_weights(self) -> Dict[str, float]:
        return dict(zip(self.style_layers, self.style_layer_weights))


def random_vgg_weights(seed: int = 0, dtype=np.float32) -> VggWeights:
    """He-normal kernels and zero biases; stands in for pretrained weights in tests"""
    rng = np.random.default_rng(seed)
    kernels, biases = {}, {}
    for name, (fan_in, fan_out) in CONV_LAYERS.items():
        std = np.sqrt(2.0 / (fan_in * 9))
        kernels[name] = (rng.standard_normal((fan_out, fan_in, 3, 3)) * std).astype(dtype)
        biases[name] = np.zeros(fan_out, dtype=dtype)
    return VggWeights(kernels, biases)


def convert_torchvision_state_dict(state_dict: Mapping[str, object]) -> VggWeights:
    """
    Build VggWeights from a torchvision ``vgg19`` state dict.

    torchvision expects inputs scaled to [0, 1] and standardized with the
    ImageNet mean/std; the std is folded into conv1_1 so ``preprocess`` only
    scales to 0-255 and subtracts the mean.
    """
    kernels, biases = {}, {}
    for name, index in TORCHVISION_INDEX.items():
        try:
            kernel = state_dict[f"features.{index}.weight"]
            bias = state_dict[f"features.{index}.bias"]
        except KeyError as exc:
            raise WeightFileError(f"missing tensor {name} (features.{index})") from exc
        kernels[name] = np.asarray(kernel.detach().cpu().numpy() if hasattr(kernel, "detach") else kernel,
                                   dtype=np.float32)
        biases[name] = np.asarray(bias.detach().cpu().numpy() if hasattr(bias, "detach") else bias,
                                  dtype=np.float32)
    scale = 255.0 * np.asarray(IMAGENET_STD_RGB, dtype=np.float32)
    kernels["conv1_1"] = kernels["conv1_1"] / scale[None, :, None, None]
    return VggWeights(kernels, biases, mean_rgb=DEFAULT_MEAN_RGB)


def save_vgg_weights(weights: VggWeights, path: PathLike) -> str:
    """Write the named-tensor container and return its SHA-256 digest"""
    tensors = {}
    for name in CONV_LAYERS:
        tensors[f"{name}.weight"] = np.ascontiguousarray(weights.kernels[name], dtype=np.float32)
        tensors[f"{name}.bias"] = np.ascontiguousarray(weights.biases[name], dtype=np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata={"architecture": "vgg19-conv", "mean_rgb": json.dumps(weights.mean_rgb)})
    return file_sha256(path)


def load_vgg_weights(path: PathLike, expected_checksum: str) -> VggWeights:
    """
    Verify and load the VGG-19 conv weights

    Args:
        path: safetensors container
        expected_checksum: SHA-256 hex digest, checked before any parsing

    Returns:
        VggWeights with canonical shapes
    """
    path = Path(path)
    if not path.is_file():
        raise WeightFileError(f"weight file not found: {path}")
    verify_checksum(path, expected_checksum)

    kernels, biases = {}, {}
    try:
        with safe_open(str(path), framework="np") as f:
            available = set(f.keys())
            metadata = f.metadata() or {}
            for name in CONV_LAYERS:
                for suffix, target in (("weight", kernels), ("bias", biases)):
                    key = f"{name}.{suffix}"
                    if key not in available:
                        raise WeightFileError(f"missing tensor {name}")
                    target[name] = f.get_tensor(key)
    except SafetensorError as exc:
        raise WeightFileError(f"cannot parse weight file {path}: {exc}") from exc

    mean_rgb = json.loads(metadata["mean_rgb"]) if "mean_rgb" in metadata else DEFAULT_MEAN_RGB
    weights = VggWeights(kernels, biases, mean_rgb=tuple(mean_rgb))
    logger.info("Loaded %d conv layers from %s", len(kernels), path)
    return weights


def preprocess(raster: Raster, mean_rgb: Sequence[float] = DEFAULT_MEAN_RGB) -> Raster:
    """Scale [0, 1] RGB to 0-255 and subtract the network's per-channel means"""
    if raster.channels != 3:
        raise ShapeMismatchError(f"preprocess needs 3 channels, got {raster.channels}")
    return Raster(raster.data * 255.0 - np.asarray(mean_rgb, dtype=raster.data.dtype))


def unpreprocess(raster: Raster, mean_rgb: Sequence[float] = DEFAULT_MEAN_RGB) -> Raster:
    if raster.channels != 3:
        raise ShapeMismatchError(f"unpreprocess needs 3 channels, got {raster.channels}")
    return Raster((raster.data + np.asarray(mean_rgb, dtype=raster.data.dtype)) / 255.0)


class FeatureTape:
    """Activations of one forward pass, kept for a single reverse pass"""

    def __init__(self, image: torch.Tensor, outputs: Dict[str, torch.Tensor]):
        self.image = image
        self.outputs = outputs

    def activations(self) -> Dict[str, np.ndarray]:
        return {name: t.detach()[0].numpy().copy() for name, t in self.outputs.items()}

    def backward(self, upstream: Mapping[str, np.ndarray]) -> np.ndarray:
        """Gradient of sum_l <upstream_l, activation_l> w.r.t. the input pixels (H x W x 3)"""
        total = None
        for name, grad in upstream.items():
            if name not in self.outputs:
                raise ShapeMismatchError(f"upstream gradient for {name} but it was not computed")
            act = self.outputs[name][0]
            if tuple(grad.shape) != tuple(act.shape):
                raise ShapeMismatchError(f"{name}: upstream shape {grad.shape}, activation shape {tuple(act.shape)}")
            term = (act * torch.as_tensor(np.asarray(grad), dtype=act.dtype)).sum()
            total = term if total is None else total + term
        if total is None:
            height, width = self.image.shape[2], self.image.shape[3]
            return np.zeros((height, width, 3), dtype=self.image.detach().numpy().dtype)
        (grad_image,) = torch.autograd.grad(total, self.image)
        return grad_image[0].permute(1, 2, 0).numpy().copy()


class VggFeatureExtractor:
    """Runs the conv stack of VGG-19 on preprocessed rasters"""

    def __init__(self, weights: VggWeights, pooling: str = "avg", dtype: torch.dtype = torch.float32):
        if pooling not in ("avg", "max"):
            raise ValueError(f"pooling must be 'avg' or 'max', got {pooling!r}")
        self.weights = weights
        self.pooling = pooling
        self.dtype = dtype
        self.mean_rgb = weights.mean_rgb
        self._kernels = {n: torch.as_tensor(k, dtype=dtype) for n, k in weights.kernels.items()}
        self._biases = {n: torch.as_tensor(b, dtype=dtype) for n, b in weights.biases.items()}

    @property
    def numpy_dtype(self):
        return np.float64 if self.dtype == torch.float64 else np.float32

    def _layer_names(self, selection: Union[LayerSelection, Iterable[str]]) -> List[str]:
        names = selection.layers() if isinstance(selection, LayerSelection) else list(dict.fromkeys(selection))
        for name in names:
            if name not in CONV_LAYERS:
                raise ValueError(f"unknown layer name {name!r}")
        if not names:
            raise ValueError("no layers requested")
        return names

    def _check_size(self, raster: Raster, names: List[str]) -> None:
        if raster.channels != 3:
            raise ShapeMismatchError(f"feature extraction needs 3 channels, got {raster.channels}")
        stages = max(POOLS_BEFORE[n] for n in names)
        minimum = 2 ** stages
        if raster.height < minimum or raster.width < minimum:
            raise ShapeMismatchError(
                f"image {raster.height}x{raster.width} too small: layer depth needs at least {minimum}x{minimum}"
            )

    def _run(self, x: torch.Tensor, names: List[str]) -> Dict[str, torch.Tensor]:
        wanted = set(names)
        outputs: Dict[str, torch.Tensor] = {}
        for entry in VGG19_LAYOUT:
            if len(outputs) == len(wanted):
                break
            if entry is None:
                x = F.avg_pool2d(x, 2, 2) if self.pooling == "avg" else F.max_pool2d(x, 2, 2)
                continue
            name = entry[0]
            x = F.relu(F.conv2d(x, self._kernels[name], self._biases[name], stride=1, padding=1))
            if name in wanted:
                outputs[name] = x
        return outputs

    def _to_tensor(self, image: Raster, requires_grad: bool) -> torch.Tensor:
        array = np.array(image.data.transpose(2, 0, 1), dtype=self.numpy_dtype, copy=True)
        return torch.from_numpy(array)[None].requires_grad_(requires_grad)

    def forward_features(self, image: Raster, selection: Union[LayerSelection, Iterable[str]]) -> Dict[str, np.ndarray]:
        """
        Post-ReLU activations (channels x height x width) for exactly the requested layers

        Args:
            image: Preprocessed RGB raster
            selection: LayerSelection or iterable of layer names
        """
        names = self._layer_names(selection)
        self._check_size(image, names)
        with torch.no_grad():
            outputs = self._run(self._to_tensor(image, False), names)
        return {name: outputs[name][0].numpy().copy() for name in names}

    def record(self, image: Raster, selection: Union[LayerSelection, Iterable[str]]) -> FeatureTape:
        """Forward pass that keeps the graph for one ``FeatureTape.backward`` call"""
        names = self._layer_names(selection)
        self._check_size(image, names)
        x = self._to_tensor(image, True)
        with torch.enable_grad():
            outputs = self._run(x, names)
        return FeatureTape(x, {name: outputs[name] for name in names})

    def backward_to_input(self, image: Raster, upstream: Mapping[str, np.ndarray]) -> np.ndarray:
        """Exact gradient of <upstream, activations> w.r.t. the input pixels, shaped H x W x 3"""
        return self.record(image, list(upstream.keys())).backward(upstream)
