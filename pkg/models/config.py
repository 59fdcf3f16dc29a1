"""Pipeline configuration: YAML document -> validated, fully resolved dataclasses.

Precedence is CLI overrides > file > dataclass defaults. Every error names the
offending key and its ``file:line`` location.
"""

import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

import yaml

from models.errors import ConfigError
from models.nst_engine import NstConfig
from models.vgg_features import LayerSelection

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NUM_CATEGORIES = 2

# Stage seeds are the root seed plus these offsets; stylize adds the category index
STAGE_SEED_OFFSETS = {"train": 0, "split": 1, "samples": 2, "stylize": 100}

COMPOSITING_MODES = ("hard", "feather")


class ConfigLoader(yaml.SafeLoader):
    """SafeLoader that also reads exponent forms such as ``1e3`` and ``5e-1`` as floats"""


ConfigLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                  |[-+]?[0-9][0-9_]*[eE][-+]?[0-9]+
                  |[-+]?\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                  |[-+]?\.(?:inf|Inf|INF)
                  |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


@dataclass
class SegmentationConfig:
    window: int = 3
    majority_filter_radius: int = 0
    workers: int = 1


@dataclass
class CompositingConfig:
    mode: str = "hard"
    feather_radius: int = 2


@dataclass
class CacheConfig:
    enabled: bool = True
    dir: Optional[Path] = None


@dataclass
class ReportConfig:
    pdf_report: bool = False


@dataclass
class PipelineConfig:
    content_image: Path
    style_images: List[Path]
    model: Path
    vgg_weights: Path
    vgg_checksum: str
    output_dir: Path = Path("output")
    seed: int = 0
    nst: NstConfig = field(default_factory=NstConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    compositing: CompositingConfig = field(default_factory=CompositingConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    single_thread: bool = False
    source: Optional[Path] = None

    def stage_seed(self, stage: str, offset: int = 0) -> int:
        return self.seed + STAGE_SEED_OFFSETS[stage] + offset

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly echo of the resolved configuration"""
        def convert(value):
            if isinstance(value, Path):
                return str(value)
            if isinstance(value, dict):
                return {k: convert(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [convert(v) for v in value]
            return value

        return convert(asdict(self))


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    raise TypeError(f"expected true/false, got {value!r}")


def _as_int(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"expected an integer, got {value!r}")
    return value


def _as_float(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"expected a number, got {value!r}")
    return float(value)


def _as_str(value: Any) -> str:
    if not isinstance(value, str):
        raise TypeError(f"expected a string, got {value!r}")
    return value


def _as_str_list(value: Any) -> List[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise TypeError(f"expected a list of strings, got {value!r}")
    return value


def _as_float_list(value: Any) -> List[float]:
    if not isinstance(value, list):
        raise TypeError(f"expected a list of numbers, got {value!r}")
    return [_as_float(v) for v in value]


Caster = Callable[[Any], Any]

TOP_LEVEL_KEYS: Dict[str, Caster] = {
    "content_image": _as_str,
    "style_images": _as_str_list,
    "model": _as_str,
    "vgg_weights": _as_str,
    "vgg_checksum": _as_str,
    "output_dir": _as_str,
    "seed": _as_int,
}
REQUIRED_KEYS = ("content_image", "style_images", "model", "vgg_weights", "vgg_checksum")

SECTION_KEYS: Dict[str, Dict[str, Caster]] = {
    "nst": {
        "alpha": _as_float,
        "beta": _as_float,
        "iterations": _as_int,
        "step_size": _as_float,
        "optimizer": _as_str,
        "init": _as_str,
        "beta1": _as_float,
        "beta2": _as_float,
        "epsilon": _as_float,
        "clamp_every_step": _as_bool,
        "pooling": _as_str,
        "log_every": _as_int,
        "content_layer": _as_str,
        "style_layers": _as_str_list,
        "style_layer_weights": _as_float_list,
    },
    "segmentation": {"window": _as_int, "majority_filter_radius": _as_int, "workers": _as_int},
    "compositing": {"mode": _as_str, "feather_radius": _as_int},
    "cache": {"enabled": _as_bool, "dir": _as_str},
    "report": {"pdf_report": _as_bool},
}

SELECTION_KEYS = ("content_layer", "style_layers", "style_layer_weights")


def _key_locations(text: str, source: str) -> Dict[str, str]:
    """Map dotted keys to ``file:line`` using the YAML node tree"""
    locations: Dict[str, str] = {}
    root = yaml.compose(text, Loader=ConfigLoader)
    if not isinstance(root, yaml.MappingNode):
        return locations
    for key_node, value_node in root.value:
        key = str(key_node.value)
        locations[key] = f"{source}:{key_node.start_mark.line + 1}"
        if isinstance(value_node, yaml.MappingNode):
            for sub_key, _ in value_node.value:
                locations[f"{key}.{sub_key.value}"] = f"{source}:{sub_key.start_mark.line + 1}"
    return locations


def parse_override(assignment: str) -> Tuple[str, Any]:
    """``section.key=value`` with the value parsed as a YAML scalar or list"""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key=value", location="command line")
    key, raw = assignment.split("=", 1)
    try:
        value = yaml.load(raw, Loader=ConfigLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}", key=key, location="command line")
    return key.strip(), value


def _apply_overrides(document: Dict[str, Any], overrides: Mapping[str, Any], locations: Dict[str, str]) -> None:
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) == 1:
            document[parts[0]] = value
        elif len(parts) == 2:
            section = document.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError("section is not a mapping", key=parts[0], location=locations.get(parts[0]))
            section[parts[1]] = value
        else:
            raise ConfigError("overrides nest at most one level", key=dotted, location="command line")
        locations[dotted] = "command line"


def _cast(key: str, caster: Caster, value: Any, locations: Dict[str, str]) -> Any:
    try:
        return caster(value)
    except TypeError as exc:
        raise ConfigError(str(exc), key=key, location=locations.get(key)) from None


def _resolve_path(base: Path, value: str) -> Path:
    path = Path(value).expanduser()
    return path if path.is_absolute() else (base / path).resolve()


def validate_config(path: PathLike, overrides: Optional[Mapping[str, Any]] = None,
                    check_paths: bool = True) -> PipelineConfig:
    """
    Parse, type-check and resolve a pipeline configuration document

    Args:
        path: YAML configuration file
        overrides: Dotted-key values taking precedence over the file
        check_paths: Require every referenced input file to exist

    Returns:
        PipelineConfig with defaults filled and paths resolved against the file's directory
    """
    path = Path(path)
    source = str(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read configuration: {exc}", location=source) from exc
    try:
        locations = _key_locations(text, source)
        document = yaml.load(text, Loader=ConfigLoader) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"invalid YAML: {exc}", location=where) from exc
    if not isinstance(document, dict):
        raise ConfigError("configuration must be a mapping of keys", location=source)
    if overrides:
        _apply_overrides(document, overrides, locations)

    values: Dict[str, Any] = {}
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in SECTION_KEYS}
    for key, value in document.items():
        key = str(key)
        if key in TOP_LEVEL_KEYS:
            values[key] = _cast(key, TOP_LEVEL_KEYS[key], value, locations)
        elif key in SECTION_KEYS:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError("section must be a mapping", key=key, location=locations.get(key))
            for sub_key, sub_value in value.items():
                dotted = f"{key}.{sub_key}"
                if sub_key not in SECTION_KEYS[key]:
                    raise ConfigError("unknown key", key=dotted, location=locations.get(dotted))
                sections[key][sub_key] = _cast(dotted, SECTION_KEYS[key][sub_key], sub_value, locations)
        else:
            raise ConfigError("unknown key", key=key, location=locations.get(key))

    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError("missing required key", key=key, location=source)
    if len(values["style_images"]) != NUM_CATEGORIES:
        raise ConfigError(
            f"expected {NUM_CATEGORIES} style images (land, water), got {len(values['style_images'])}",
            key="style_images", location=locations.get("style_images"),
        )

    base = path.parent.resolve()
    content_image = _resolve_path(base, values["content_image"])
    style_images = [_resolve_path(base, p) for p in values["style_images"]]
    model = _resolve_path(base, values["model"])
    vgg_weights = _resolve_path(base, values["vgg_weights"])
    if check_paths:
        referenced = [("content_image", content_image), ("model", model), ("vgg_weights", vgg_weights)]
        referenced += [("style_images", p) for p in style_images]
        for key, file_path in referenced:
            if not file_path.is_file():
                raise ConfigError(f"file not found: {file_path}", key=key, location=locations.get(key))

    nst_values = dict(sections["nst"])
    selection_values = {k: nst_values.pop(k) for k in SELECTION_KEYS if k in nst_values}
    try:
        selection = LayerSelection(**selection_values)
        nst = NstConfig(selection=selection, **nst_values)
    except ValueError as exc:
        raise ConfigError(str(exc), key="nst", location=locations.get("nst", source)) from None

    segmentation = SegmentationConfig(**sections["segmentation"])
    if segmentation.window < 1 or segmentation.window % 2 == 0:
        raise ConfigError("window must be an odd positive integer", key="segmentation.window",
                          location=locations.get("segmentation.window"))
    if segmentation.majority_filter_radius < 0 or segmentation.workers < 1:
        raise ConfigError("majority_filter_radius must be >= 0 and workers >= 1", key="segmentation",
                          location=locations.get("segmentation"))

    compositing = CompositingConfig(**sections["compositing"])
    if compositing.mode not in COMPOSITING_MODES:
        raise ConfigError(f"mode must be one of {COMPOSITING_MODES}", key="compositing.mode",
                          location=locations.get("compositing.mode"))
    if compositing.feather_radius < 0:
        raise ConfigError("feather_radius must be >= 0", key="compositing.feather_radius",
                          location=locations.get("compositing.feather_radius"))

    cache_values = dict(sections["cache"])
    cache = CacheConfig(
        enabled=cache_values.get("enabled", True),
        dir=_resolve_path(base, cache_values["dir"]) if "dir" in cache_values else base / ".artmap_cache",
    )

    config = PipelineConfig(
        content_image=content_image,
        style_images=style_images,
        model=model,
        vgg_weights=vgg_weights,
        vgg_checksum=values["vgg_checksum"],
        output_dir=_resolve_path(base, values.get("output_dir", "output")),
        seed=values.get("seed", 0),
        nst=nst,
        segmentation=segmentation,
        compositing=compositing,
        cache=cache,
        report=ReportConfig(**sections["report"]),
        source=path.resolve(),
    )
    logger.info("Resolved configuration from %s", path)
    logger.debug("Configuration: %s", config.to_dict())
    return config
