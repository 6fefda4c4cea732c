"""Declarative network description, loaded from JSON.

Key schema (all keys optional unless marked):

``input_size`` (required)
    Square input side in pixels.
``backbone`` (required)
    Ordered list of ``{"name", "kind": "conv"|"pool", "out_channels", "kernel",
    "stride", "pad", "dilation"}``. Conv layers are followed by relu.
``prediction_layers`` (required)
    Ordered list of ``{"name", "source", "stride", "scales", "aggregate",
    "lower", "higher"}``. ``source``/``lower``/``higher`` name backbone layers;
    ``aggregate`` selects aggregated features over plain inception features.
``aspect_ratios``, ``inception_width``, ``inception_dilation``, ``aif_width``
``attention``: ``{"enabled", "scope": "all"|"first", "width", "source"}``
``loss_weights``: ``{"cls", "loc", "att"}``
``cls_normalization``: ``"positives"`` (summed over kept anchors, divided by the
    positive count) or ``"anchors"`` (plain mean over kept anchors)
``matching``: ``{"pos_threshold", "neg_pos_ratio", "min_negatives", "rotated"}``
``inference``: ``{"conf_threshold", "nms_threshold", "rotated_nms", "top_k"}``
``optimizer``: ``{"lr", "momentum", "decay_step", "decay_factor", "freeze_layers", "batch_size"}``
``augment``: ``{"enabled", "mirror", "color", "max_trials", "min_overlaps"}``
``precision``: ``"float32"`` or ``"float64"``
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .anchors import ASPECT_RATIOS, LayerAnchorSpec

__all__ = [
    "ConfigError",
    "BackboneLayer",
    "PredictionLayer",
    "AttentionConfig",
    "LossWeights",
    "MatchingConfig",
    "InferenceConfig",
    "OptimizerConfig",
    "AugmentConfig",
    "DetectorConfig",
    "load_config",
    "builtin_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class BackboneLayer:
    name: str
    kind: str = "conv"
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    dilation: int = 1


@dataclass
class PredictionLayer:
    name: str
    source: str
    stride: int
    scales: tuple[float, ...]
    aggregate: bool = False
    lower: str | None = None
    higher: str | None = None


@dataclass
class AttentionConfig:
    enabled: bool = True
    scope: str = "all"
    width: int = 16
    source: str | None = None


@dataclass
class LossWeights:
    cls: float = 1.0
    loc: float = 1.0
    att: float = 1.0


@dataclass
class MatchingConfig:
    pos_threshold: float = 0.5
    neg_pos_ratio: float = 3.0
    min_negatives: int = 32
    rotated: bool = False


@dataclass
class InferenceConfig:
    conf_threshold: float = 0.7
    nms_threshold: float = 0.3
    rotated_nms: bool = True
    top_k: int = 200


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    decay_step: int = 15000
    decay_factor: float = 0.1
    freeze_layers: int = 0
    batch_size: int = 4


@dataclass
class AugmentConfig:
    enabled: bool = True
    mirror: bool = True
    color: bool = True
    max_trials: int = 50
    min_overlaps: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)


_SECTIONS = {
    "attention": AttentionConfig,
    "loss_weights": LossWeights,
    "matching": MatchingConfig,
    "inference": InferenceConfig,
    "optimizer": OptimizerConfig,
    "augment": AugmentConfig,
}


@dataclass
class DetectorConfig:
    input_size: int
    backbone: list[BackboneLayer]
    prediction_layers: list[PredictionLayer]
    aspect_ratios: tuple[float, ...] = ASPECT_RATIOS
    inception_width: int = 64
    inception_dilation: int = 2
    aif_width: int = 64
    head_kernel: int = 3
    cls_normalization: str = "positives"
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    precision: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.input_size < 1:
            raise ConfigError("input_size must be positive")
        strides = self.backbone_strides()
        names = [layer.name for layer in self.backbone]
        if len(set(names)) != len(names):
            raise ConfigError("backbone layer names must be unique")
        if not self.prediction_layers:
            raise ConfigError("at least one prediction layer is required")
        prev = 0
        for p in self.prediction_layers:
            for ref in (p.source, p.lower, p.higher):
                if ref is not None and ref not in strides:
                    raise ConfigError(f"{p.name}: unknown backbone layer {ref!r}")
            if strides[p.source] != p.stride:
                raise ConfigError(f"{p.name}: declared stride {p.stride} but {p.source} has stride {strides[p.source]}")
            if p.stride <= prev:
                raise ConfigError("prediction layer strides must be strictly increasing")
            prev = p.stride
            if self.input_size % p.stride:
                raise ConfigError(f"{p.name}: input size {self.input_size} not divisible by stride {p.stride}")
            if p.lower is not None and strides[p.lower] * 2 != p.stride:
                raise ConfigError(f"{p.name}: lower neighbour must have half the stride")
            if p.higher is not None and strides[p.higher] != p.stride * 2:
                raise ConfigError(f"{p.name}: higher neighbour must have twice the stride")
            if len(p.scales) != 3:
                raise ConfigError(f"{p.name}: expected three scales")
        if self.inception_width % 4:
            raise ConfigError("inception_width must be divisible by 4")
        inf = self.inference
        for name, v in (("conf_threshold", inf.conf_threshold), ("nms_threshold", inf.nms_threshold),
                        ("pos_threshold", self.matching.pos_threshold)):
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.cls_normalization not in ("positives", "anchors"):
            raise ConfigError("cls_normalization must be 'positives' or 'anchors'")
        if self.attention.scope not in ("all", "first"):
            raise ConfigError("attention.scope must be 'all' or 'first'")
        if self.attention_source not in {p.name for p in self.prediction_layers}:
            raise ConfigError(f"attention source {self.attention_source!r} is not a prediction layer")

    @property
    def attention_source(self) -> str:
        return self.attention.source or self.prediction_layers[0].name

    def backbone_strides(self) -> dict[str, int]:
        strides, s, size = {}, 1, self.input_size
        for layer in self.backbone:
            if layer.kind not in ("conv", "pool"):
                raise ConfigError(f"{layer.name}: unknown layer kind {layer.kind!r}")
            if layer.kind == "pool":
                size = (size - layer.kernel + 2 * layer.pad) // layer.stride + 1
            else:
                size = (size + 2 * layer.pad - layer.dilation * (layer.kernel - 1) - 1) // layer.stride + 1
            if size < 1:
                raise ConfigError(f"{layer.name}: feature map collapses to zero size")
            s *= layer.stride
            if size * s != self.input_size:
                raise ConfigError(f"{layer.name}: {size} px at stride {s} does not tile a {self.input_size} px input")
            strides[layer.name] = s
        return strides

    def anchor_specs(self) -> list[LayerAnchorSpec]:
        return [LayerAnchorSpec(p.name, p.stride, tuple(p.scales), tuple(self.aspect_ratios))
                for p in self.prediction_layers]

    def inception_taps(self) -> list[str]:
        taps: list[str] = []
        for p in self.prediction_layers:
            for ref in (p.lower, p.source, p.higher):
                if ref is not None and ref not in taps:
                    taps.append(ref)
        strides = self.backbone_strides()
        return sorted(taps, key=lambda t: strides[t])

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            d["backbone"] = [BackboneLayer(**layer) for layer in d["backbone"]]
            d["prediction_layers"] = [
                PredictionLayer(**{**p, "scales": tuple(p["scales"])}) for p in d["prediction_layers"]
            ]
            for key, sub in _SECTIONS.items():
                if key in d and isinstance(d[key], dict):
                    d[key] = sub(**d[key])
            if "aspect_ratios" in d:
                d["aspect_ratios"] = tuple(d["aspect_ratios"])
            if isinstance(d.get("augment"), AugmentConfig):
                d["augment"].min_overlaps = tuple(d["augment"].min_overlaps)
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    def replace(self, **changes) -> "DetectorConfig":
        d = self.to_dict()
        for key, value in changes.items():
            if "." in key:
                section, sub = key.split(".", 1)
                d[section] = {**d[section], sub: value}
            else:
                d[key] = value
        return DetectorConfig.from_dict(d)


def load_config(path_or_name) -> DetectorConfig:
    """Load a JSON config file, or a builtin by name (``desk``, ``full``, ``tiny``)."""
    name = str(path_or_name)
    if name in ("desk", "full", "tiny"):
        return builtin_config(name)
    path = Path(name)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return DetectorConfig.from_dict(data)


def builtin_config(name: str) -> DetectorConfig:
    text = resources.files("textdet.configs").joinpath(f"{name}.json").read_text()
    return DetectorConfig.from_dict(json.loads(text))
