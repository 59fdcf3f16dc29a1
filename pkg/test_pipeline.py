import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import yaml

import app
from conftest import SHALLOW_SELECTION
from models import pipeline
from models.collage import CollageInput, compose
from models.config import STAGE_SEED_OFFSETS, parse_override, validate_config
from models.errors import ConfigError, StageError
from models.eurosat import DatasetManifest
from models.mlp_segmenter import init_params, save_params
from models.nst_engine import StyleTransfer
from models.pipeline import PARTIAL_MARKER, PipelineRunner, RunReport, StyleTargetCache
from models.raster import labels_from_colors, load_image
from models.samples import brushstroke_style, scene_samples, wave_style
from models.vgg_features import LayerSelection

FAST_NST = dict(iterations=3, **SHALLOW_SELECTION)
ARTIFACTS = ["labels.png", "stylized_0.png", "stylized_1.png", "collage.png",
             "trace_0.jsonl", "trace_1.jsonl", "report.json"]


def yaml_lines(document):
    return yaml.safe_dump(document, sort_keys=False).splitlines()


class TestValidateConfig:
    def test_defaults_filled(self, write_config):
        cfg = validate_config(write_config())
        assert cfg.nst.iterations == 500
        assert cfg.segmentation.window == 3
        assert cfg.compositing.mode == "hard"
        assert cfg.nst.selection.content_layer == "conv4_2"
        assert cfg.seed == 0

    def test_echo_is_json_ready(self, write_config):
        echo = validate_config(write_config()).to_dict()
        assert json.loads(json.dumps(echo))["nst"]["iterations"] == 500
        assert isinstance(echo["content_image"], str)

    def test_one_style_image(self, write_config, run_inputs):
        path = write_config(style_images=run_inputs["style_images"][:1])
        with pytest.raises(ConfigError, match="expected 2 style images") as info:
            validate_config(path)
        assert info.value.key == "style_images"

    def test_unknown_key_named_with_line(self, tmp_path, run_inputs):
        document = dict(run_inputs, nst={"iteratons": 20})
        lines = yaml_lines(document)
        path = tmp_path / "typo.yaml"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        line = next(i for i, text in enumerate(lines, start=1) if "iteratons" in text)
        with pytest.raises(ConfigError, match="iteratons") as info:
            validate_config(path)
        assert info.value.key == "nst.iteratons"
        assert info.value.location == f"{path}:{line}"

    def test_unknown_top_level_key(self, write_config):
        with pytest.raises(ConfigError) as info:
            validate_config(write_config(colour="blue"))
        assert info.value.key == "colour"

    def test_missing_required_key(self, tmp_path, run_inputs):
        document = {k: v for k, v in run_inputs.items() if k != "model"}
        path = tmp_path / "missing.yaml"
        path.write_text(yaml.safe_dump(document), encoding="utf-8")
        with pytest.raises(ConfigError) as info:
            validate_config(path)
        assert info.value.key == "model"

    def test_dangling_path(self, write_config, tmp_path):
        with pytest.raises(ConfigError, match="file not found") as info:
            validate_config(write_config(model=str(tmp_path / "absent.bin")))
        assert info.value.key == "model"

    def test_type_error_located(self, write_config):
        with pytest.raises(ConfigError) as info:
            validate_config(write_config(nst={"iterations": "many"}))
        assert info.value.key == "nst.iterations"

    def test_invalid_nst_values(self, write_config):
        with pytest.raises(ConfigError):
            validate_config(write_config(nst={"content_layer": "conv9_9"}))

    def test_relative_paths_resolve_against_file(self, tmp_path, run_inputs):
        cfg_dir = tmp_path / "configs"
        cfg_dir.mkdir()
        path = cfg_dir / "run.yaml"
        path.write_text(yaml.safe_dump(dict(run_inputs, output_dir="out")), encoding="utf-8")
        assert validate_config(path).output_dir == (cfg_dir / "out").resolve()

    def test_overrides_beat_file(self, write_config):
        path = write_config(nst={"iterations": 20}, seed=4)
        cfg = validate_config(path, {"nst.iterations": 7, "compositing.mode": "feather"})
        assert cfg.nst.iterations == 7
        assert cfg.compositing.mode == "feather"
        assert cfg.seed == 4

    def test_parse_override(self):
        assert parse_override("nst.beta=1e4") == ("nst.beta", 1e4)
        assert parse_override("nst.style_layers=[conv1_1, conv2_1]") == ("nst.style_layers", ["conv1_1", "conv2_1"])
        with pytest.raises(ConfigError):
            parse_override("nst.beta")

    def test_exponent_numbers_in_file(self, tmp_path, run_inputs):
        path = tmp_path / "exponents.yaml"
        text = yaml.safe_dump(run_inputs, sort_keys=False)
        text += "nst:\n  beta: 1e3\n  alpha: 2.5E-1\n  epsilon: 1.0e-8\n"
        path.write_text(text, encoding="utf-8")
        cfg = validate_config(path)
        assert cfg.nst.beta == 1000.0
        assert cfg.nst.alpha == 0.25
        assert cfg.nst.epsilon == 1e-8

    def test_plain_numbers_keep_their_type(self):
        assert parse_override("nst.iterations=40") == ("nst.iterations", 40)
        assert parse_override("nst.step_size=.5") == ("nst.step_size", 0.5)
        assert parse_override("vgg_checksum=1e3abc") == ("vgg_checksum", "1e3abc")


class TestStyleTargetCache:
    @pytest.fixture
    def cache(self, tmp_path, extractor):
        return StyleTargetCache(tmp_path / "cache", StyleTransfer(extractor), "abc123")

    @pytest.fixture
    def selection(self):
        return LayerSelection(**SHALLOW_SELECTION)

    def test_warm_call_reads_cache(self, cache, selection, monkeypatch):
        style = brushstroke_style(24)
        cold = cache.cache_style_targets(style, selection, (16, 16))

        def no_extraction(*args, **kwargs):
            raise AssertionError("features extracted on a warm call")

        monkeypatch.setattr(pipeline, "build_style_targets", no_extraction)
        warm = cache.cache_style_targets(style, selection, (16, 16))
        assert (cache.misses, cache.hits) == (1, 1)
        for name in selection.style_layers:
            assert np.array_equal(cold.layers[name].gram, warm.layers[name].gram)
            assert cold.layers[name].positions == warm.layers[name].positions

    def test_changed_inputs_miss(self, cache, selection):
        style = brushstroke_style(24)
        cache.cache_style_targets(style, selection, (16, 16))
        cache.cache_style_targets(wave_style(24), selection, (16, 16))
        cache.cache_style_targets(style, selection, (24, 24))
        assert cache.misses == 3
        assert len(list(cache.directory.glob("*.npz"))) == 3

    def test_concurrent_writers_of_one_key(self, tmp_path, extractor, selection):
        style = brushstroke_style(24)
        for trial in range(10):
            cache = StyleTargetCache(tmp_path / f"cache{trial}", StyleTransfer(extractor), "abc123")
            barrier = threading.Barrier(2)

            def fill():
                barrier.wait()
                return cache.cache_style_targets(style, selection, (16, 16))

            with ThreadPoolExecutor(max_workers=2) as pool:
                results = [f.result() for f in [pool.submit(fill), pool.submit(fill)]]
            for name in selection.style_layers:
                assert np.array_equal(results[0].layers[name].gram, results[1].layers[name].gram)
            assert cache.hits + cache.misses == 2
            assert [p.suffix for p in cache.directory.iterdir()] == [".npz"]

    def test_corrupt_entry_recomputed(self, cache, selection, caplog):
        style = brushstroke_style(24)
        cold = cache.cache_style_targets(style, selection, (16, 16))
        path = cache.path_for(cache.key(style, selection, (16, 16)))
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with caplog.at_level(logging.WARNING, logger="models.pipeline"):
            again = cache.cache_style_targets(style, selection, (16, 16))
        assert "corrupt" in caplog.text
        assert cache.misses == 2
        for name in selection.style_layers:
            assert np.array_equal(cold.layers[name].gram, again.layers[name].gram)
        # entry was overwritten with a readable one
        assert cache.cache_style_targets(style, selection, (16, 16)) is not None
        assert cache.hits == 1


def fast_config(write_config, name="run.yaml", **sections):
    sections.setdefault("nst", dict(FAST_NST))
    cfg = validate_config(write_config(name, **sections))
    cfg.single_thread = True
    return cfg


class TestRun:
    def test_artifacts_and_report(self, write_config):
        cfg = fast_config(write_config)
        report = PipelineRunner(cfg).run()
        for name in ARTIFACTS:
            assert (cfg.output_dir / name).is_file(), name
        assert not (cfg.output_dir / PARTIAL_MARKER).exists()

        saved = RunReport.from_json(cfg.output_dir / "report.json")
        assert saved.histogram == report.histogram
        assert sum(saved.histogram) == 128 * 128
        assert all(count > 0 for count in saved.histogram)
        assert saved.stage_names() == ["load", "segment", "write_labels", "stylize", "compose"]
        assert all(stage["seconds"] >= 0 for stage in saved.stages)
        assert saved.config["nst"]["iterations"] == 3
        assert set(saved.final_losses) == {"0", "1"}

        lines = (cfg.output_dir / "trace_0.jsonl").read_text(encoding="utf-8").splitlines()
        assert [json.loads(line)["iter"] for line in lines] == [0, 1, 2]

    def test_collage_reverifies_from_artifacts(self, write_config):
        cfg = fast_config(write_config)
        PipelineRunner(cfg).run()
        labels = labels_from_colors(load_image(cfg.output_dir / "labels.png"))
        stylized = [load_image(cfg.output_dir / f"stylized_{k}.png") for k in range(2)]
        collage = load_image(cfg.output_dir / "collage.png")
        assert np.array_equal(compose(CollageInput(labels, stylized)).data, collage.data)

    def test_deterministic_single_thread(self, write_config, tmp_path):
        first = PipelineRunner(fast_config(write_config, "a.yaml")).run()
        second_cfg = fast_config(write_config, "b.yaml", output_dir=str(tmp_path / "second"))
        second = PipelineRunner(second_cfg).run()
        assert np.max(np.abs(first.collage.data - second.collage.data)) < 1e-6

    def test_concurrent_matches_single_thread(self, write_config, tmp_path):
        single = PipelineRunner(fast_config(write_config, "a.yaml")).run()
        threaded_cfg = fast_config(write_config, "b.yaml", output_dir=str(tmp_path / "threaded"))
        threaded_cfg.single_thread = False
        threaded = PipelineRunner(threaded_cfg).run()
        assert threaded.histogram == single.histogram
        assert np.allclose(single.collage.data, threaded.collage.data, atol=0.05)

    def test_shared_style_image_concurrent(self, write_config, run_inputs):
        land_style = run_inputs["style_images"][0]
        cfg = fast_config(write_config, style_images=[land_style, land_style])
        cfg.single_thread = False
        report = PipelineRunner(cfg).run()
        assert "stylize" in report.stage_names()
        assert len(list(cfg.cache.dir.glob("*.npz"))) == 1
        assert not list(cfg.cache.dir.glob("*.tmp"))

    def test_all_land_collage_is_first_stylized(self, write_config, tmp_path):
        land_only = init_params([27, 4, 2], seed=0).zeros_like()
        land_only.biases[-1][:] = [1.0, -1.0]
        model = tmp_path / "land_only.bin"
        save_params(land_only, model)
        cfg = fast_config(write_config, model=str(model))
        report = PipelineRunner(cfg).run()
        assert report.histogram == [128 * 128, 0]
        assert np.array_equal(report.collage.data, report.stylized[0].data)
        assert report.final_losses["1"] is None
        assert (cfg.output_dir / "trace_1.jsonl").read_text(encoding="utf-8") == ""
        placeholder = load_image(cfg.output_dir / "stylized_1.png")
        assert np.array_equal(placeholder.data, load_image(cfg.content_image).data)

    def test_feather_and_majority_filter_stages(self, write_config):
        cfg = fast_config(write_config, compositing={"mode": "feather", "feather_radius": 2},
                          segmentation={"majority_filter_radius": 1})
        report = PipelineRunner(cfg).run()
        assert "majority_filter" in report.stage_names()
        assert (cfg.output_dir / "collage.png").is_file()

    def test_pdf_report(self, write_config):
        cfg = fast_config(write_config, report={"pdf_report": True})
        report = PipelineRunner(cfg).run()
        pdf = cfg.output_dir / "report.pdf"
        assert pdf.read_bytes()[:4] == b"%PDF"
        assert "pdf_report" in report.stage_names()

    def test_stage_failure_leaves_marker(self, write_config, tmp_path):
        cfg = fast_config(write_config)
        cfg.vgg_checksum = "0" * 64
        with pytest.raises(StageError) as info:
            PipelineRunner(cfg).run()
        assert info.value.stage == "load"
        assert (cfg.output_dir / PARTIAL_MARKER).is_file()

    def test_marker_cleared_by_next_success(self, write_config):
        cfg = fast_config(write_config)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        (cfg.output_dir / PARTIAL_MARKER).write_text("stale", encoding="utf-8")
        PipelineRunner(cfg).run()
        assert not (cfg.output_dir / PARTIAL_MARKER).exists()

    @pytest.mark.slow
    def test_coastal_scene_default_layers(self, write_config):
        cfg = fast_config(write_config, nst={"iterations": 20})
        report = PipelineRunner(cfg).run()
        assert all(count > 0 for count in report.histogram)
        for trace in report.traces:
            assert trace[-1]["total"] < trace[0]["total"]


class TestCli:
    def test_run_command(self, write_config):
        path = write_config(nst=dict(FAST_NST, iterations=10))
        assert app.main(["run", "-c", str(path), "--single-thread", "--iterations", "2"]) == 0
        report = json.loads((path.parent / "out" / "report.json").read_text(encoding="utf-8"))
        assert report["config"]["nst"]["iterations"] == 2
        assert report["config"]["single_thread"] is True

    def test_config_error_exit_code(self, write_config):
        path = write_config(nst={"iteratons": 3})
        assert app.main(["run", "-c", str(path)]) == 2

    def test_stage_error_exit_code(self, write_config):
        path = write_config(nst=dict(FAST_NST), vgg_checksum="0" * 64)
        assert app.main(["run", "-c", str(path), "--single-thread"]) == 3

    def test_samples_then_segment_stylize_collage(self, tmp_path, stub_weight_file, tiny_model):
        dest = tmp_path / "samples"
        assert app.main(["samples", "--dest", str(dest), "--size", "32"]) == 0
        model = tmp_path / "model.bin"
        save_params(tiny_model, model)
        weights, checksum = stub_weight_file

        labels = tmp_path / "labels.png"
        assert app.main(["segment", "--model", str(model), "--image", str(dest / "coastal.png"),
                         "--out", str(labels)]) == 0
        outputs = []
        for k, style in enumerate(["style_land.png", "style_water.png"]):
            out = tmp_path / f"stylized_{k}.png"
            assert app.main(["stylize", "--content", str(dest / "coastal.png"), "--style", str(dest / style),
                             "--weights", str(weights), "--checksum", checksum, "--iterations", "2",
                             "--content-layer", "conv2_1", "--style-layers", "conv1_1", "conv2_1",
                             "--out", str(out)]) == 0
            assert out.with_suffix(".jsonl").is_file()
            outputs.append(str(out))
        collage = tmp_path / "collage.png"
        assert app.main(["collage", "--labels", str(labels), "--stylized", *outputs, "--out", str(collage)]) == 0
        assert load_image(collage).shape == (32, 32, 3)

    def test_train_synthetic(self, tmp_path):
        out = tmp_path / "model.bin"
        assert app.main(["train", "--synthetic", "--epochs", "2", "--hidden", "8", "--out", str(out)]) == 0
        report = json.loads(out.with_suffix(".report.json").read_text(encoding="utf-8"))
        assert len(report["epochs"]) == 2
        assert 0.0 <= report["test"]["accuracy"] <= 1.0

    def test_dataset_sampling_uses_samples_seed(self, tmp_path, monkeypatch):
        seeds = {}

        def fake_extract(manifest, window, per_patch_cap, seed, workers):
            seeds["samples"] = seed
            return scene_samples(window=window, per_scene=300)

        monkeypatch.setattr(app, "build_manifest", lambda root: DatasetManifest(root=tmp_path))
        monkeypatch.setattr(app, "extract_pixel_samples", fake_extract)
        out = tmp_path / "model.bin"
        assert app.main(["train", "--dataset-root", str(tmp_path), "--seed", "7", "--epochs", "1",
                         "--hidden", "4", "--out", str(out)]) == 0
        assert seeds["samples"] == 7 + STAGE_SEED_OFFSETS["samples"]
        assert seeds["samples"] != 7 + STAGE_SEED_OFFSETS["train"]

    def test_exponent_override(self, write_config):
        path = write_config(nst=dict(FAST_NST))
        assert app.main(["run", "-c", str(path), "--single-thread", "--iterations", "1",
                         "--set", "nst.beta=1e4", "--set", "nst.step_size=5e-1"]) == 0
        report = json.loads((path.parent / "out" / "report.json").read_text(encoding="utf-8"))
        assert report["config"]["nst"]["beta"] == 1e4
        assert report["config"]["nst"]["step_size"] == 0.5
