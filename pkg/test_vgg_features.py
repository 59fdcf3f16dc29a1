import numpy as np
import pytest
import torch
import torch.nn.functional as F
from safetensors.numpy import save_file

from models.checksums import file_sha256
from models.errors import ChecksumMismatchError, ShapeMismatchError, WeightFileError
from models.raster import Raster
from models.vgg_features import (
    CONV_LAYERS,
    DEFAULT_MEAN_RGB,
    IMAGENET_STD_RGB,
    TORCHVISION_INDEX,
    LayerSelection,
    VggFeatureExtractor,
    VggWeights,
    convert_torchvision_state_dict,
    load_vgg_weights,
    preprocess,
    save_vgg_weights,
    unpreprocess,
)


def tensors_of(weights, skip=()):
    tensors = {}
    for name in CONV_LAYERS:
        if name in skip:
            continue
        tensors[f"{name}.weight"] = weights.kernels[name]
        tensors[f"{name}.bias"] = weights.biases[name]
    return tensors


class TestWeightFile:
    def test_load_saved_weights(self, stub_weight_file, stub_weights):
        path, checksum = stub_weight_file
        loaded = load_vgg_weights(path, checksum)
        assert len(loaded.kernels) == 16
        assert loaded.kernels["conv1_1"].shape == (64, 3, 3, 3)
        assert loaded.kernels["conv5_4"].shape == (512, 512, 3, 3)
        assert np.array_equal(loaded.kernels["conv3_2"], stub_weights.kernels["conv3_2"])
        assert loaded.mean_rgb == DEFAULT_MEAN_RGB

    def test_channel_progression(self):
        outs = [fan_out for _, fan_out in CONV_LAYERS.values()]
        assert outs == [64, 64, 128, 128] + [256] * 4 + [512] * 8

    def test_missing_tensor(self, tmp_path, stub_weights):
        path = tmp_path / "partial.safetensors"
        save_file(tensors_of(stub_weights, skip=("conv3_1",)), str(path))
        with pytest.raises(WeightFileError, match="missing tensor conv3_1"):
            load_vgg_weights(path, file_sha256(path))

    def test_wrong_shape_names_layer(self, tmp_path, stub_weights):
        tensors = tensors_of(stub_weights)
        tensors["conv2_1.weight"] = np.zeros((128, 32, 3, 3), dtype=np.float32)
        path = tmp_path / "bad.safetensors"
        save_file(tensors, str(path))
        with pytest.raises(WeightFileError, match="conv2_1"):
            load_vgg_weights(path, file_sha256(path))

    def test_checksum_checked_before_parsing(self, tmp_path):
        path = tmp_path / "garbage.safetensors"
        path.write_bytes(b"not a tensor file")
        with pytest.raises(ChecksumMismatchError):
            load_vgg_weights(path, "0" * 64)

    def test_unparseable_file(self, tmp_path):
        path = tmp_path / "garbage.safetensors"
        path.write_bytes(b"not a tensor file")
        with pytest.raises(WeightFileError):
            load_vgg_weights(path, file_sha256(path))

    def test_mean_constants_travel_with_file(self, tmp_path, stub_weights):
        weights = VggWeights(stub_weights.kernels, stub_weights.biases, mean_rgb=(100.0, 110.0, 120.0))
        path = tmp_path / "means.safetensors"
        checksum = save_vgg_weights(weights, path)
        assert load_vgg_weights(path, checksum).mean_rgb == (100.0, 110.0, 120.0)


class TestTorchvisionConversion:
    def test_missing_key(self):
        with pytest.raises(WeightFileError, match="conv1_1"):
            convert_torchvision_state_dict({})

    def test_folded_std_matches_standardized_input(self, stub_weights, rng):
        state = {}
        for name, index in TORCHVISION_INDEX.items():
            state[f"features.{index}.weight"] = torch.from_numpy(stub_weights.kernels[name])
            state[f"features.{index}.bias"] = torch.from_numpy(stub_weights.biases[name])
        converted = convert_torchvision_state_dict(state)
        pixels = rng.random((6, 6, 3)).astype(np.float32)

        ours = VggFeatureExtractor(converted).forward_features(preprocess(Raster(pixels)), ["conv1_1"])["conv1_1"]
        mean01 = np.asarray(DEFAULT_MEAN_RGB, dtype=np.float32) / 255.0
        standardized = (pixels - mean01) / np.asarray(IMAGENET_STD_RGB, dtype=np.float32)
        x = torch.from_numpy(standardized.transpose(2, 0, 1).copy())[None]
        reference = F.relu(F.conv2d(x, torch.from_numpy(stub_weights.kernels["conv1_1"]), padding=1))[0].numpy()
        assert np.allclose(ours, reference, atol=1e-3)


class TestPreprocess:
    def test_mean_colour_maps_to_zero(self):
        mean = np.asarray(DEFAULT_MEAN_RGB) / 255.0
        assert np.allclose(preprocess(Raster(np.full((2, 2, 3), mean))).data, 0.0, atol=1e-9)

    def test_inverse_pair(self, rng):
        data = rng.random((5, 4, 3))
        assert np.max(np.abs(unpreprocess(preprocess(Raster(data))).data - data)) < 1e-6

    def test_elementwise(self, rng):
        data = rng.random((3, 3, 3))
        out = preprocess(Raster(data)).data
        for c in range(3):
            assert np.allclose(out[..., c], data[..., c] * 255.0 - DEFAULT_MEAN_RGB[c])

    def test_channel_count(self):
        with pytest.raises(ShapeMismatchError):
            preprocess(Raster(np.zeros((2, 2, 1))))


class TestForwardFeatures:
    def test_shape_law_224(self, extractor, rng):
        image = preprocess(Raster(rng.random((224, 224, 3)).astype(np.float32)))
        acts = extractor.forward_features(image, ["conv1_1", "conv4_2"])
        assert acts["conv1_1"].shape == (64, 224, 224)
        assert acts["conv4_2"].shape == (512, 28, 28)

    def test_shapes_and_relu(self, extractor, rng):
        image = preprocess(Raster(rng.random((32, 32, 3)).astype(np.float32)))
        acts = extractor.forward_features(image, LayerSelection())
        expected = {"conv1_1": (64, 32, 32), "conv2_1": (128, 16, 16), "conv3_1": (256, 8, 8),
                    "conv4_1": (512, 4, 4), "conv4_2": (512, 4, 4), "conv5_1": (512, 2, 2)}
        assert {k: v.shape for k, v in acts.items()} == expected
        assert all(np.all(v >= 0) for v in acts.values())

    def test_exactly_requested_layers(self, extractor, random_raster):
        acts = extractor.forward_features(preprocess(random_raster(8, 8)), ["conv2_2", "conv1_2"])
        assert set(acts) == {"conv1_2", "conv2_2"}

    def test_zero_weights_give_zero_activations(self, stub_weights, random_raster):
        zeros = VggWeights({k: np.zeros_like(v) for k, v in stub_weights.kernels.items()},
                           {k: np.zeros_like(v) for k, v in stub_weights.biases.items()})
        acts = VggFeatureExtractor(zeros).forward_features(preprocess(random_raster(32, 32)), LayerSelection())
        assert all(np.all(v == 0) for v in acts.values())

    def test_deterministic(self, extractor, random_raster):
        image = preprocess(random_raster(16, 16))
        a = extractor.forward_features(image, ["conv3_1"])
        b = extractor.forward_features(image, ["conv3_1"])
        assert np.array_equal(a["conv3_1"], b["conv3_1"])

    def test_max_pooling_variant(self, stub_weights, random_raster):
        image = preprocess(random_raster(8, 8))
        avg = VggFeatureExtractor(stub_weights).forward_features(image, ["conv2_1"])["conv2_1"]
        mx = VggFeatureExtractor(stub_weights, pooling="max").forward_features(image, ["conv2_1"])["conv2_1"]
        assert avg.shape == mx.shape == (128, 4, 4)
        assert not np.array_equal(avg, mx)

    def test_unknown_layer(self, extractor, random_raster):
        with pytest.raises(ValueError):
            extractor.forward_features(preprocess(random_raster()), ["conv6_1"])

    def test_image_too_small(self, extractor, random_raster):
        with pytest.raises(ShapeMismatchError):
            extractor.forward_features(preprocess(random_raster(8, 8)), LayerSelection())


class TestBackwardToInput:
    def upstream_for(self, extractor, image, layers, rng):
        acts = extractor.forward_features(image, layers)
        return {name: rng.normal(size=act.shape) for name, act in acts.items()}

    def test_zero_upstream(self, extractor64, random_raster):
        image = preprocess(random_raster(8, 8).astype(np.float64))
        acts = extractor64.forward_features(image, ["conv1_2"])
        grad = extractor64.backward_to_input(image, {"conv1_2": np.zeros_like(acts["conv1_2"])})
        assert grad.shape == (8, 8, 3)
        assert np.all(grad == 0)

    def test_additive_across_layers(self, extractor64, random_raster, rng):
        image = preprocess(random_raster(8, 8).astype(np.float64))
        upstream = self.upstream_for(extractor64, image, ["conv1_1", "conv2_1"], rng)
        both = extractor64.backward_to_input(image, upstream)
        separate = sum(extractor64.backward_to_input(image, {k: v}) for k, v in upstream.items())
        assert np.allclose(both, separate, rtol=1e-10, atol=1e-10)

    def test_shape_mismatch(self, extractor64, random_raster):
        image = preprocess(random_raster(8, 8).astype(np.float64))
        with pytest.raises(ShapeMismatchError):
            extractor64.backward_to_input(image, {"conv1_1": np.zeros((64, 4, 4))})

    def test_finite_differences(self, extractor64, random_raster, rng):
        layers = ["conv1_2", "conv2_1"]
        base = preprocess(random_raster(8, 8).astype(np.float64)).data
        upstream = self.upstream_for(extractor64, Raster(base), layers, rng)
        grad = extractor64.backward_to_input(Raster(base), upstream)

        def objective(data):
            acts = extractor64.forward_features(Raster(data), layers)
            return sum(float(np.sum(upstream[k] * acts[k])) for k in layers)

        step = 1e-4
        errors = []
        for index in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[index] += step
            minus[index] -= step
            numeric = (objective(plus) - objective(minus)) / (2 * step)
            scale = max(abs(numeric), abs(grad[index]), 1e-6)
            errors.append(abs(numeric - grad[index]) / scale)
        assert np.mean(np.array(errors) < 1e-3) >= 0.99
