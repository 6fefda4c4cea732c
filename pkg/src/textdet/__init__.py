"""Single-shot oriented text detection with text attention and aggregated inception features."""

from .anchors import AnchorSet, LayerAnchorSpec, generate_default_boxes, match_anchors, build_targets
from .config import DetectorConfig, ConfigError, load_config, builtin_config
from .detector import ModelParams, Trainer, detect, forward, init_params, train_step
from .evaluation import EvalReport, evaluate_detections
from .geometry import Detection, OrientedBox, decode_offsets, encode_offsets, iou_axis_aligned, iou_rotated, nms
from .scene import SceneConfig, SceneSample, generate_scene
from .tensor import Tensor, gradcheck
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "AnchorSet", "LayerAnchorSpec", "generate_default_boxes", "match_anchors", "build_targets",
    "DetectorConfig", "ConfigError", "load_config", "builtin_config",
    "ModelParams", "Trainer", "detect", "forward", "init_params", "train_step",
    "EvalReport", "evaluate_detections",
    "Detection", "OrientedBox", "decode_offsets", "encode_offsets", "iou_axis_aligned", "iou_rotated", "nms",
    "SceneConfig", "SceneSample", "generate_scene",
    "Tensor", "gradcheck",
    "load_weights", "save_weights",
]
