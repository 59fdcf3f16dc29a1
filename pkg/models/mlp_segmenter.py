"""Multilayer perceptron pixel classifier: init, forward, backprop, SGD training and segmentation."""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.metrics import accuracy_score, confusion_matrix
from tqdm import tqdm

from models.eurosat import SampleSet
from models.errors import ArtMapError, ShapeMismatchError
from models.logging_utils import progress_enabled
from models.raster import LabelMap, Raster, window_features

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NUM_OUTPUTS = 2
LOG_FLOOR = 1e-12

MODEL_MAGIC = b"ARTMAPML"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<8sHH")


@dataclass
class MlpParams:
    """Weights (fan_out x fan_in) and biases per layer; also used for gradients"""

    layer_sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeMismatchError(
                f"{len(self.layer_sizes)} layer sizes need {len(self.layer_sizes) - 1} weight/bias pairs, "
                f"got {len(self.weights)}/{len(self.biases)}"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expected or b.shape != (expected[0],):
                raise ShapeMismatchError(
                    f"layer {i}: weights {w.shape} / bias {b.shape}, expected {expected} / ({expected[0]},)"
                )

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_sizes), [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases]
        )

    def same_shape(self, other: "MlpParams") -> bool:
        return self.layer_sizes == other.layer_sizes and all(
            a.shape == b.shape for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 128
    hidden_sizes: List[int] = field(default_factory=lambda: [64])
    seed: int = 0
    activation: str = "relu"
    init: str = "he-uniform"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.init != "he-uniform":
            raise ValueError(f"unsupported init {self.init!r}")

    def layer_sizes(self, input_dim: int) -> List[int]:
        return [input_dim, *self.hidden_sizes, NUM_OUTPUTS]


@dataclass
class TrainReport:
    """One record per completed epoch"""

    records: List[Dict[str, Any]] = field(default_factory=list)
    test: Optional[Dict[str, Any]] = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, epoch: int, train_loss: float, train_acc: float, val_acc: Optional[float]) -> None:
        self.records.append({"epoch": epoch, "train_loss": train_loss, "train_acc": train_acc, "val_acc": val_acc})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=["epoch", "train_loss", "train_acc", "val_acc"])

    def to_json(self, path: PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload: Any = json.loads(self.to_frame().to_json(orient="records", double_precision=15))
        if self.test is not None:
            payload = {"epochs": payload, "test": self.test}
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")


def init_params(layer_sizes: Sequence[int], seed: int, dtype=np.float64) -> MlpParams:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases"""
    layer_sizes = [int(s) for s in layer_sizes]
    if len(layer_sizes) < 3:
        raise ValueError(f"need at least input, hidden and output layers, got {layer_sizes}")
    if layer_sizes[-1] != NUM_OUTPUTS:
        raise ValueError(f"final layer must have {NUM_OUTPUTS} nodes, got {layer_sizes[-1]}")
    if min(layer_sizes) < 1:
        raise ValueError(f"layer sizes must be positive, got {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(layer_sizes, weights, biases)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _forward_pass(params: MlpParams, features: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
    if features.ndim != 2 or features.shape[1] != params.input_dim:
        raise ShapeMismatchError(f"features of shape {features.shape} do not match input size {params.input_dim}")
    activations = [features.astype(params.weights[0].dtype, copy=False)]
    pre_activations = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = activations[-1] @ w.T + b
        pre_activations.append(z)
        if i < last:
            activations.append(np.maximum(z, 0.0))
    return _softmax(pre_activations[-1]), activations, pre_activations


def forward_batch(params: MlpParams, features: np.ndarray) -> np.ndarray:
    """Class probabilities for an N x D feature matrix"""
    probs, _, _ = _forward_pass(params, np.atleast_2d(features))
    return probs


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """ReLU hidden layers, softmax output; returns the (land, water) probability pair"""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ShapeMismatchError(f"expected a single feature vector, got shape {x.shape}")
    return forward_batch(params, x[None, :])[0]


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-ln(probs[label]) with the probability floored at 1e-12"""
    return float(-np.log(max(float(probs[label]), LOG_FLOOR)))


def _batch_losses(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(picked, LOG_FLOOR))


def backward(params: MlpParams, features: np.ndarray, labels: np.ndarray) -> MlpParams:
    """
    Gradient of the batch-mean cross-entropy w.r.t. every weight and bias

    Args:
        params: Current network parameters
        features: N x D batch
        labels: N binary labels

    Returns:
        MlpParams holding the gradients
    """
    features = np.atleast_2d(features)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise ValueError("backward needs a nonempty batch")
    if labels.shape != (features.shape[0],):
        raise ShapeMismatchError(f"{features.shape[0]} samples but {labels.shape} labels")

    probs, activations, pre_activations = _forward_pass(params, features)
    n = features.shape[0]
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads = params.zeros_like()
    for i in range(len(params.weights) - 1, -1, -1):
        grads.weights[i] = delta.T @ activations[i]
        grads.biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * (pre_activations[i - 1] > 0)
    return grads


def sgd_step(params: MlpParams, grads: MlpParams, learning_rate: float) -> MlpParams:
    """p' = p - lr * g for every parameter"""
    if not params.same_shape(grads):
        raise ShapeMismatchError("gradient shapes do not match parameter shapes")
    return MlpParams(
        list(params.layer_sizes),
        [w - learning_rate * g for w, g in zip(params.weights, grads.weights)],
        [b - learning_rate * g for b, g in zip(params.biases, grads.biases)],
    )


def predict_labels(params: MlpParams, features: np.ndarray) -> np.ndarray:
    """Argmax class per row, ties go to land"""
    probs = forward_batch(params, features)
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def evaluate(params: MlpParams, samples: SampleSet) -> Dict[str, Any]:
    """Accuracy and 2x2 confusion matrix (rows true, columns predicted)"""
    if len(samples) == 0:
        return {"accuracy": None, "confusion_matrix": None, "count": 0}
    predicted = predict_labels(params, samples.features)
    return {
        "accuracy": float(accuracy_score(samples.labels, predicted)),
        "confusion_matrix": confusion_matrix(samples.labels, predicted, labels=[0, 1]).tolist(),
        "count": len(samples),
    }


class MlpTrainer:
    """Seeded mini-batch SGD over a SampleSet"""

    def __init__(self, config: TrainConfig):
        self.config = config

    def train(self, train_set: SampleSet, val_set: Optional[SampleSet] = None) -> Tuple[MlpParams, TrainReport]:
        """
        Run ``config.epochs`` epochs of shuffled mini-batch SGD

        Returns:
            Final parameters and the per-epoch report
        """
        cfg = self.config
        if len(train_set) == 0:
            raise ArtMapError("cannot train on an empty training set")
        params = init_params(cfg.layer_sizes(train_set.feature_dim), cfg.seed)
        if val_set is not None and len(val_set) and val_set.feature_dim != train_set.feature_dim:
            raise ShapeMismatchError("validation features do not match training features")

        report = TrainReport()
        shuffle_rng = np.random.default_rng([cfg.seed, 1])
        labels = train_set.labels.astype(np.int64)
        n = len(train_set)

        epochs = tqdm(range(1, cfg.epochs + 1), desc="epochs", disable=not progress_enabled(logger))
        for epoch in epochs:
            order = shuffle_rng.permutation(n)
            loss_sum = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch_x, batch_y = train_set.features[idx], labels[idx]
                probs = forward_batch(params, batch_x)
                loss_sum += float(_batch_losses(probs, batch_y).sum())
                params = sgd_step(params, backward(params, batch_x, batch_y), cfg.learning_rate)

            train_acc = float(accuracy_score(labels, predict_labels(params, train_set.features)))
            val_acc = evaluate(params, val_set)["accuracy"] if val_set is not None else None
            report.append(epoch, loss_sum / n, train_acc, val_acc)
            logger.info("epoch %d: loss %.4f train_acc %.4f val_acc %s", epoch, loss_sum / n, train_acc, val_acc)
        return params, report


def segment(params: MlpParams, raster: Raster, window: int, workers: int = 1) -> LabelMap:
    """
    Label every pixel land (0) or water (1)

    Rows are classified in independent chunks when ``workers`` > 1; the
    result does not depend on the chunking.
    """
    if raster.channels != 3:
        raise ShapeMismatchError(f"segmentation needs an RGB raster, got {raster.channels} channels")
    if raster.channels * window * window != params.input_dim:
        raise ShapeMismatchError(
            f"window {window} gives {raster.channels * window * window} features, model expects {params.input_dim}"
        )
    features = window_features(raster.data, window).reshape(raster.height, raster.width, -1)

    def classify(rows: np.ndarray) -> np.ndarray:
        return predict_labels(params, rows.reshape(-1, params.input_dim)).reshape(rows.shape[0], rows.shape[1])

    if workers > 1 and raster.height > 1:
        chunks = np.array_split(features, min(workers * 4, raster.height), axis=0)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            labels = np.concatenate(list(pool.map(classify, chunks)), axis=0)
    else:
        labels = classify(features)
    return LabelMap(labels, num_categories=NUM_OUTPUTS)


def majority_filter(labels: LabelMap, radius: int) -> LabelMap:
    """Replace each label by the majority in its reflect-padded (2r+1)^2 window; ties keep the centre"""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return labels
    size = 2 * radius + 1
    padded = np.pad(labels.labels, radius, mode="reflect")
    windows = sliding_window_view(padded, (size, size))
    counts = np.stack([(windows == k).sum(axis=(2, 3)) for k in range(labels.num_categories)], axis=-1)
    best = counts.argmax(axis=-1)
    centre = labels.labels
    centre_count = np.take_along_axis(counts, centre[..., None], axis=-1)[..., 0]
    keep = centre_count == counts.max(axis=-1)
    return LabelMap(np.where(keep, centre, best), num_categories=labels.num_categories)


def save_params(params: MlpParams, path: PathLike) -> None:
    """Versioned container: magic, version, layer count, u32 layer sizes, then float64 weights/biases per layer"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(params.layer_sizes)))
        f.write(struct.pack(f"<{len(params.layer_sizes)}I", *params.layer_sizes))
        for w, b in zip(params.weights, params.biases):
            f.write(w.astype("<f8").tobytes(order="C"))
            f.write(b.astype("<f8").tobytes())


def load_params(path: PathLike) -> MlpParams:
    blob = Path(path).read_bytes()
    if len(blob) < _MODEL_HEADER.size:
        raise ArtMapError(f"{path} is too short to be a model file")
    magic, version, num_layers = _MODEL_HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise ArtMapError(f"{path} is not a model file (magic {magic!r})")
    if version != MODEL_VERSION:
        raise ArtMapError(f"unsupported model version {version} in {path}")
    offset = _MODEL_HEADER.size
    layer_sizes = list(struct.unpack_from(f"<{num_layers}I", blob, offset))
    offset += 4 * num_layers
    expected = offset + 8 * sum(o * i + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))
    if len(blob) != expected:
        raise ArtMapError(f"{path} has {len(blob)} bytes, layer sizes imply {expected}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fan_out * fan_in, offset=offset).reshape(fan_out, fan_in)
        offset += 8 * fan_out * fan_in
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpParams(layer_sizes, weights, biases)
