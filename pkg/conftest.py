import numpy as np
import pytest
import torch
import yaml

from models.mlp_segmenter import MlpTrainer, TrainConfig, save_params
from models.raster import Raster
from models.samples import coastal_scene, scene_samples, write_samples
from models.vgg_features import LayerSelection, VggFeatureExtractor, random_vgg_weights, save_vgg_weights

# Layers shallow enough for 8x8 and 12x12 inputs
SHALLOW_SELECTION = dict(content_layer="conv2_1", style_layers=["conv1_1", "conv2_1"])


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_raster(rng):
    def make(height=8, width=8, channels=3):
        return Raster(rng.random((height, width, channels)).astype(np.float32))
    return make


@pytest.fixture(scope="session")
def stub_weights():
    return random_vgg_weights(seed=0)


@pytest.fixture(scope="session")
def stub_weight_file(tmp_path_factory, stub_weights):
    """Random VGG-19 weights in a safetensors container plus the file's SHA-256"""
    path = tmp_path_factory.mktemp("weights") / "vgg19_stub.safetensors"
    checksum = save_vgg_weights(stub_weights, path)
    return path, checksum


@pytest.fixture(scope="session")
def extractor(stub_weights):
    return VggFeatureExtractor(stub_weights)


@pytest.fixture(scope="session")
def extractor64(stub_weights):
    return VggFeatureExtractor(stub_weights, dtype=torch.float64)


@pytest.fixture
def shallow_selection():
    return LayerSelection(**SHALLOW_SELECTION)


@pytest.fixture(scope="session")
def coastal():
    return coastal_scene(128)


@pytest.fixture(scope="session")
def tiny_model():
    samples = scene_samples(window=3, size=64, per_scene=1500)
    params, _ = MlpTrainer(TrainConfig(epochs=10, batch_size=64, hidden_sizes=[16], seed=0)).train(samples)
    return params


@pytest.fixture(scope="session")
def run_inputs(tmp_path_factory, stub_weight_file, tiny_model):
    """Sample images, stub weights and a trained model on disk"""
    root = tmp_path_factory.mktemp("inputs")
    images = write_samples(root, size=128)
    model_path = root / "segmenter.bin"
    save_params(tiny_model, model_path)
    weights_path, checksum = stub_weight_file
    return {
        "content_image": str(images["content"]),
        "style_images": [str(images["land_style"]), str(images["water_style"])],
        "model": str(model_path),
        "vgg_weights": str(weights_path),
        "vgg_checksum": checksum,
    }


@pytest.fixture
def write_config(tmp_path, run_inputs):
    """Write a run configuration; keyword sections are merged over the defaults"""
    def write(name="run.yaml", **sections):
        document = dict(run_inputs)
        document["output_dir"] = str(tmp_path / "out")
        document["cache"] = {"dir": str(tmp_path / "cache")}
        document.update(sections)
        path = tmp_path / name
        path.write_text(yaml.safe_dump(document, sort_keys=False), encoding="utf-8")
        return path
    return write
