"""ArtMap command line: dataset fetch, train, segment, stylize, collage, run, samples."""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from models.collage import CollageInput, compose, feathered_compose
from models.config import STAGE_SEED_OFFSETS, parse_override, validate_config
from models.errors import ArtMapError, ConfigError, StageError
from models.eurosat import (
    EUROSAT_RGB_URL,
    build_manifest,
    extract_pixel_samples,
    fetch_dataset,
    save_sample_set,
    split,
)
from models.logging_utils import configure_logging
from models.mlp_segmenter import MlpTrainer, TrainConfig, evaluate, load_params, majority_filter, save_params, segment
from models.nst_engine import NstConfig, StyleTransfer
from models.pipeline import PipelineRunner
from models.raster import colorize_labels, labels_from_colors, load_image, save_image
from models.samples import scene_samples, write_samples
from models.vgg_features import (
    LayerSelection,
    VggFeatureExtractor,
    load_vgg_weights,
    random_vgg_weights,
    save_vgg_weights,
)

logger = logging.getLogger("artmap")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_STAGE = 3


def cmd_dataset_fetch(args) -> int:
    manifest = fetch_dataset(args.url, args.dest, args.checksum)
    for category in manifest.categories():
        count = sum(1 for _, c in manifest.entries if c == category)
        logger.info("%-22s %6d patches", category, count)
    print(f"{manifest.total_count} patches in {len(manifest.categories())} categories under {manifest.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.synthetic:
        samples = scene_samples(window=args.window, sample_seed=args.seed + STAGE_SEED_OFFSETS["samples"])
    else:
        if args.dataset_root is None:
            raise ConfigError("train needs --dataset-root or --synthetic", key="dataset_root",
                              location="command line")
        manifest = build_manifest(args.dataset_root)
        manifest = manifest.subset(args.categories or manifest.categories(), args.per_category)
        samples = extract_pixel_samples(manifest, window=args.window, per_patch_cap=args.per_patch_cap,
                                        seed=args.seed + STAGE_SEED_OFFSETS["samples"], workers=args.workers)
    train_set, val_set, test_set = split(samples, seed=args.seed + STAGE_SEED_OFFSETS["split"])
    if args.save_samples:
        save_sample_set(samples, args.save_samples)

    config = TrainConfig(learning_rate=args.learning_rate, epochs=args.epochs, batch_size=args.batch_size,
                         hidden_sizes=args.hidden, seed=args.seed + STAGE_SEED_OFFSETS["train"])
    params, report = MlpTrainer(config).train(train_set, val_set)
    report.test = evaluate(params, test_set)
    save_params(params, args.out)
    report_path = args.report or Path(args.out).with_suffix(".report.json")
    report.to_json(report_path)
    logger.info("Training config: %s", asdict(config))
    print(f"saved model to {args.out}; test accuracy {report.test['accuracy']}")
    return EXIT_OK


def cmd_segment(args) -> int:
    params = load_params(args.model)
    labels = segment(params, load_image(args.image), args.window, workers=args.workers)
    if args.majority_radius:
        labels = majority_filter(labels, args.majority_radius)
    save_image(colorize_labels(labels), args.out)
    print(f"land/water pixel counts: {labels.histogram()}")
    return EXIT_OK


def cmd_stylize(args) -> int:
    weights = load_vgg_weights(args.weights, args.checksum)
    selection_kwargs = {}
    if args.content_layer:
        selection_kwargs["content_layer"] = args.content_layer
    if args.style_layers:
        selection_kwargs["style_layers"] = args.style_layers
    cfg = NstConfig(alpha=args.alpha, beta=args.beta, selection=LayerSelection(**selection_kwargs),
                    iterations=args.iterations, step_size=args.step_size, optimizer=args.optimizer,
                    init=args.init, seed=args.seed, pooling=args.pooling,
                    clamp_every_step=args.clamp_every_step)
    transfer = StyleTransfer(VggFeatureExtractor(weights, pooling=cfg.pooling))
    stylized, trace = transfer.stylize(load_image(args.content), load_image(args.style), cfg)
    save_image(stylized, args.out)
    trace.to_jsonl(args.trace or Path(args.out).with_suffix(".jsonl"))
    print(f"final loss {trace[-1]['total']:.6g} (initial {trace[0]['total']:.6g})")
    return EXIT_OK


def cmd_collage(args) -> int:
    labels = labels_from_colors(load_image(args.labels))
    collage_input = CollageInput(labels, [load_image(p) for p in args.stylized])
    if args.feather:
        result = feathered_compose(collage_input, args.feather)
    else:
        result = compose(collage_input)
    save_image(result, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def run_overrides(args) -> dict:
    overrides = dict(parse_override(item) for item in args.set or [])
    if args.iterations is not None:
        overrides["nst.iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = str(Path(args.output_dir).resolve())
    if args.feather is not None:
        overrides["compositing.mode"] = "feather"
        overrides["compositing.feather_radius"] = args.feather
    if args.pdf_report:
        overrides["report.pdf_report"] = True
    return overrides


def cmd_run(args) -> int:
    cfg = validate_config(args.config, run_overrides(args))
    cfg.single_thread = args.single_thread
    if args.show_config:
        print(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    report = PipelineRunner(cfg).run()
    print(f"histogram {report.histogram}; artifacts in {cfg.output_dir}")
    return EXIT_OK


def cmd_samples(args) -> int:
    dest = Path(args.dest)
    outputs = write_samples(dest, size=args.size)
    for name, path in outputs.items():
        print(f"{name}: {path}")
    if args.stub_weights:
        checksum = save_vgg_weights(random_vgg_weights(seed=args.seed), dest / "vgg19_stub.safetensors")
        print(f"stub weights: {dest / 'vgg19_stub.safetensors'} sha256={checksum}")
    if args.train_model:
        samples = scene_samples(window=3, sample_seed=args.seed)
        params, _ = MlpTrainer(TrainConfig(epochs=10, seed=args.seed)).train(samples)
        save_params(params, dest / "segmenter.bin")
        print(f"model: {dest / 'segmenter.bin'}")
    return EXIT_OK


def add_run_arguments(parser):
    parser.add_argument("-c", "--config", required=True, help="Path to the YAML run configuration")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="Override one configuration key (repeatable)")
    parser.add_argument("--iterations", type=int, help="Style transfer iterations per category")
    parser.add_argument("--seed", type=int, help="Root seed")
    parser.add_argument("--output-dir", help="Directory receiving the artifacts")
    parser.add_argument("--single-thread", action="store_true",
                        help="Run the stylize passes one after the other with a single torch thread")
    parser.add_argument("--feather", type=int, metavar="RADIUS", help="Blend boundaries over RADIUS pixels")
    parser.add_argument("--pdf-report", action="store_true", help="Also write report.pdf")
    parser.add_argument("--show-config", action="store_true", help="Print the resolved configuration")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artmap", description="Artistic collages from satellite images")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="EuroSAT dataset management")
    dataset_sub = dataset.add_subparsers(dest="dataset_command", required=True)
    fetch = dataset_sub.add_parser("fetch", help="Download, verify and unpack EuroSAT RGB")
    fetch.add_argument("--dest", required=True, help="Target directory")
    fetch.add_argument("--checksum", required=True, help="Expected SHA-256 of the archive")
    fetch.add_argument("--url", default=EUROSAT_RGB_URL, help="Archive URL")
    fetch.set_defaults(func=cmd_dataset_fetch)

    train = sub.add_parser("train", help="Train the land/water pixel classifier")
    train.add_argument("--dataset-root", help="Unpacked EuroSAT directory")
    train.add_argument("--synthetic", action="store_true", help="Train on generated coastal scenes instead")
    train.add_argument("--categories", nargs="+", default=None, help="EuroSAT categories to use (default: all)")
    train.add_argument("--per-category", type=int, default=None, help="Patches per category")
    train.add_argument("--per-patch-cap", type=int, default=64)
    train.add_argument("--window", type=int, default=3)
    train.add_argument("--hidden", type=int, nargs="+", default=[64])
    train.add_argument("--epochs", type=int, default=20)
    train.add_argument("--learning-rate", type=float, default=0.05)
    train.add_argument("--batch-size", type=int, default=128)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--workers", type=int, default=1)
    train.add_argument("--save-samples", help="Also write the extracted SampleSet")
    train.add_argument("--report", help="Training report JSON (default: next to the model)")
    train.add_argument("--out", required=True, help="Model file to write")
    train.set_defaults(func=cmd_train)

    seg = sub.add_parser("segment", help="Label an image land/water")
    seg.add_argument("--model", required=True)
    seg.add_argument("--image", required=True)
    seg.add_argument("--window", type=int, default=3)
    seg.add_argument("--majority-radius", type=int, default=0)
    seg.add_argument("--workers", type=int, default=1)
    seg.add_argument("--out", required=True, help="Colour-coded label PNG")
    seg.set_defaults(func=cmd_segment)

    sty = sub.add_parser("stylize", help="Style transfer of one content/style pair")
    sty.add_argument("--content", required=True)
    sty.add_argument("--style", required=True)
    sty.add_argument("--weights", required=True, help="VGG-19 safetensors file")
    sty.add_argument("--checksum", required=True, help="SHA-256 of the weight file")
    sty.add_argument("--alpha", type=float, default=1.0)
    sty.add_argument("--beta", type=float, default=1000.0)
    sty.add_argument("--iterations", type=int, default=500)
    sty.add_argument("--step-size", type=float, default=2.0)
    sty.add_argument("--optimizer", choices=["adam", "plain-gd"], default="adam")
    sty.add_argument("--init", choices=["content", "noise"], default="content")
    sty.add_argument("--pooling", choices=["avg", "max"], default="avg")
    sty.add_argument("--content-layer")
    sty.add_argument("--style-layers", nargs="+")
    sty.add_argument("--clamp-every-step", action="store_true")
    sty.add_argument("--seed", type=int, default=0)
    sty.add_argument("--trace", help="Loss trace JSONL (default: next to the output)")
    sty.add_argument("--out", required=True)
    sty.set_defaults(func=cmd_stylize)

    col = sub.add_parser("collage", help="Compose stylized images under a label map")
    col.add_argument("--labels", required=True, help="Label PNG written by segment")
    col.add_argument("--stylized", nargs=2, required=True, metavar=("LAND", "WATER"))
    col.add_argument("--feather", type=int, default=0, metavar="RADIUS")
    col.add_argument("--out", required=True)
    col.set_defaults(func=cmd_collage)

    run = sub.add_parser("run", help="Segment, stylize per category and compose in one go")
    add_run_arguments(run)
    run.set_defaults(func=cmd_run)

    smp = sub.add_parser("samples", help="Write the synthetic coastal scene and style images")
    smp.add_argument("--dest", required=True)
    smp.add_argument("--size", type=int, default=128)
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--stub-weights", action="store_true", help="Also write random VGG-19 weights")
    smp.add_argument("--train-model", action="store_true", help="Also train a small segmenter on generated scenes")
    smp.set_defaults(func=cmd_samples)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        logger.error("%s", exc)
        return EXIT_STAGE
    except ArtMapError as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE
    except Exception:
        logger.exception("unexpected failure")
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
