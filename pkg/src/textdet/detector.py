"""The single-shot word detector: parameters, forward pass, loss, training and inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .anchors import AnchorSet, TargetBundle, build_targets, generate_default_boxes, match_anchors
from .attention import AttentionMaps, attention_loss, compute_attention, encode_attention, init_attention
from .config import DetectorConfig
from .geometry import Detection, OrientedBox, decode_array, enclosing_rects, iou_matrix_aligned, nms, normalize_angle
from .inception import aggregate_aif, inception_block, init_aif, init_inception
from .scene import SceneSample
from .tensor import Tensor, concat, conv2d, maxpool2d, relu, smooth_l1, softmax_cross_entropy

__all__ = [
    "ModelParams",
    "ForwardOutput",
    "LossRecord",
    "OptimizerState",
    "init_params",
    "forward",
    "image_batch",
    "total_loss",
    "compute_targets",
    "train_step",
    "Trainer",
    "augment_sample",
    "mirror_sample",
    "detect",
    "NonFiniteLossError",
]

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, components: Mapping[str, float]):
        self.step = step
        self.components = dict(components)
        super().__init__(f"non-finite loss at step {step}: {self.components}")


class ModelParams(dict):
    """Name -> Tensor. Names are dotted paths such as ``head.AIF-1.cls.w``."""

    def sub(self, prefix: str) -> dict[str, Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype=None) -> "ModelParams":
        return cls({k: Tensor(np.asarray(v, dtype=dtype) if dtype else np.asarray(v), name=k)
                    for k, v in arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), name=k) for k, v in self.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype), name=k) for k, v in self.items()})


HEAD_INIT_SCALE = 0.1


def _he(rng, shape, dtype, gain=1.0):
    bound = gain * math.sqrt(6.0 / int(np.prod(shape[1:])))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: DetectorConfig, seed: int = 0) -> ModelParams:
    """He-uniform weights, zero biases, bilinear upsampling and a zero attention projection.

    Prediction heads are drawn at ``HEAD_INIT_SCALE`` times the He bound so
    untrained scores start near 0.5 instead of saturating.
    """
    rng = np.random.default_rng(seed)
    dt = config.dtype
    arrays: dict[str, np.ndarray] = {}
    channels = {}
    c = 3
    for layer in config.backbone:
        if layer.kind == "conv":
            arrays[f"backbone.{layer.name}.w"] = _he(rng, (layer.out_channels, c, layer.kernel, layer.kernel), dt)
            arrays[f"backbone.{layer.name}.b"] = np.zeros((1, layer.out_channels, 1, 1), dt)
            c = layer.out_channels
        channels[layer.name] = c
    for tap in config.inception_taps():
        for k, v in init_inception(rng, channels[tap], config.inception_width, dt).items():
            arrays[f"inception.{tap}.{k}"] = v
    anchors_per_loc = {s.layer_name: s.boxes_per_location for s in config.anchor_specs()}
    for p in config.prediction_layers:
        width = config.inception_width
        if p.aggregate:
            n_in = config.inception_width * (1 + (p.lower is not None) + (p.higher is not None))
            for k, v in init_aif(rng, n_in, config.aif_width, dt).items():
                arrays[f"aif.{p.name}.{k}"] = v
            width = config.aif_width
        k = anchors_per_loc[p.name]
        hk = config.head_kernel
        arrays[f"head.{p.name}.cls.w"] = _he(rng, (2 * k, width, hk, hk), dt, HEAD_INIT_SCALE)
        arrays[f"head.{p.name}.cls.b"] = np.zeros((1, 2 * k, 1, 1), dt)
        arrays[f"head.{p.name}.loc.w"] = _he(rng, (5 * k, width, hk, hk), dt, HEAD_INIT_SCALE)
        arrays[f"head.{p.name}.loc.b"] = np.zeros((1, 5 * k, 1, 1), dt)
    if config.attention.enabled:
        src = next(p for p in config.prediction_layers if p.name == config.attention_source)
        width = config.aif_width if src.aggregate else config.inception_width
        for k, v in init_attention(rng, width, config.attention.width, src.stride, dt).items():
            arrays[f"attention.{k}"] = v
    return ModelParams.from_arrays(arrays)


def check_params(params: ModelParams, config: DetectorConfig) -> None:
    expected = init_params_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise KeyError(f"missing parameter tensor {name!r}")
        if params[name].shape != shape:
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, config needs {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise KeyError(f"unexpected parameter tensors: {sorted(extra)}")


_shape_cache: dict[str, dict[str, tuple]] = {}


def init_params_shapes(config: DetectorConfig) -> dict[str, tuple]:
    key = config.dumps()
    if key not in _shape_cache:
        _shape_cache[key] = {k: v.shape for k, v in init_params(config).items()}
    return _shape_cache[key]


@dataclass
class ForwardOutput:
    cls: dict[str, Tensor]  # (N, H, W, K, 2)
    loc: dict[str, Tensor]  # (N, H, W, K, 5)
    cls_flat: Tensor  # (N, A, 2)
    loc_flat: Tensor  # (N, A, 5)
    attention: AttentionMaps | None
    features: dict[str, Tensor] = field(default_factory=dict)


def image_batch(images: Sequence[np.ndarray], dtype=np.float32) -> Tensor:
    """Stack ``(3, S, S)`` images in [0, 1] into a centred ``(N, 3, S, S)`` batch."""
    return Tensor((np.stack(images).astype(dtype) - 0.5) * 2.0)


def forward(image: Tensor, params: Mapping[str, Tensor], config: DetectorConfig) -> ForwardOutput:
    if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (config.input_size, config.input_size):
        raise ValueError(f"expected (N, 3, {config.input_size}, {config.input_size}) input, got {image.shape}")
    params = params if isinstance(params, ModelParams) else ModelParams(params)
    taps = set(config.inception_taps())
    x = image
    backbone: dict[str, Tensor] = {}
    for layer in config.backbone:
        if layer.kind == "conv":
            try:
                w, b = params[f"backbone.{layer.name}.w"], params[f"backbone.{layer.name}.b"]
            except KeyError as exc:
                raise KeyError(f"missing parameter tensor {exc.args[0]!r}") from None
            x = relu(conv2d(x, w, b, stride=layer.stride, pad=layer.pad, dilation=layer.dilation))
        else:
            x = maxpool2d(x, layer.kernel, layer.stride, layer.pad)
        if layer.name in taps:
            backbone[layer.name] = x
    inc = {t: inception_block(backbone[t], params.sub(f"inception.{t}"), config.inception_dilation) for t in taps}
    feats: dict[str, Tensor] = {}
    for p in config.prediction_layers:
        if p.aggregate:
            feats[p.name] = aggregate_aif(
                inc[p.lower] if p.lower else None, inc[p.source], inc[p.higher] if p.higher else None,
                params.sub(f"aif.{p.name}"),
            )
        else:
            feats[p.name] = inc[p.source]
    maps = None
    if config.attention.enabled:
        if config.attention.scope == "all":
            gated = [p.name for p in config.prediction_layers]
        else:
            gated = [config.attention_source]
        sizes = {name: feats[name].shape[2:] for name in gated}
        maps = compute_attention(feats[config.attention_source], params.sub("attention"), config.input_size, sizes)
        for name in gated:
            feats[name] = encode_attention(feats[name], maps, name)
    n = image.shape[0]
    cls, loc, cls_parts, loc_parts = {}, {}, [], []
    pad = config.head_kernel // 2
    for p in config.prediction_layers:
        head = params.sub(f"head.{p.name}")
        f = feats[p.name]
        k = head["cls.w"].shape[0] // 2
        h, w = f.shape[2:]
        c = conv2d(f, head["cls.w"], head["cls.b"], pad=pad).reshape(n, k, 2, h, w).transpose(0, 3, 4, 1, 2)
        r = conv2d(f, head["loc.w"], head["loc.b"], pad=pad).reshape(n, k, 5, h, w).transpose(0, 3, 4, 1, 2)
        cls[p.name], loc[p.name] = c, r
        cls_parts.append(c.reshape(n, h * w * k, 2))
        loc_parts.append(r.reshape(n, h * w * k, 5))
    cls_flat = concat(cls_parts, axis=1) if len(cls_parts) > 1 else cls_parts[0]
    loc_flat = concat(loc_parts, axis=1) if len(loc_parts) > 1 else loc_parts[0]
    return ForwardOutput(cls, loc, cls_flat, loc_flat, maps, feats)


def _background_losses(cls_logits: np.ndarray) -> np.ndarray:
    """-log p(background) per anchor from ``(A, 2)`` logits."""
    m = cls_logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(cls_logits - m).sum(axis=-1))
    return lse - cls_logits[..., 0]


def compute_targets(out: ForwardOutput, samples: Sequence[SceneSample], anchors: AnchorSet,
                    config: DetectorConfig) -> list[TargetBundle]:
    m = config.matching
    bundles = []
    logits = out.cls_flat.data
    for i, s in enumerate(samples):
        assignment = match_anchors(anchors, s.box_array(), m.pos_threshold, rotated=m.rotated)
        bundles.append(build_targets(assignment, anchors, s.box_array(), m.neg_pos_ratio,
                                     _background_losses(logits[i]), m.min_negatives))
    return bundles


def total_loss(out: ForwardOutput, targets: Sequence[TargetBundle], mask=None,
               weights=None, normalize: str = "positives") -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of anchor cross-entropy, per-positive smooth-L1 and the attention loss.

    With ``normalize="positives"`` the cross-entropy is summed over kept
    anchors and divided by the number of positives; ``"anchors"`` takes the
    plain mean over kept anchors.
    """
    if normalize not in ("positives", "anchors"):
        raise ValueError(f"unknown normalization {normalize!r}")
    weights = weights or {"cls": 1.0, "loc": 1.0, "att": 1.0}
    if not isinstance(weights, Mapping):
        weights = {"cls": weights.cls, "loc": weights.loc, "att": weights.att}
    labels = np.stack([t.labels for t in targets])
    if not (labels >= 0).any():
        raise ValueError("no positive and no retained negative anchors in the batch")
    logits = out.cls_flat.transpose(0, 2, 1)
    cls = softmax_cross_entropy(logits, labels, ignore_label=-1)
    pos = labels == 1
    n_pos = int(pos.sum())
    if normalize == "positives" and n_pos:
        # mean over kept anchors -> sum over kept anchors / positives
        cls = cls * (float((labels >= 0).sum()) / n_pos)
    if n_pos:
        target_offsets = np.stack([t.offsets for t in targets])
        loc = smooth_l1(out.loc_flat, target_offsets, np.broadcast_to(pos[..., None], target_offsets.shape)) / n_pos
    else:
        loc = None
    total = cls * weights["cls"]
    if loc is not None:
        total = total + loc * weights["loc"]
    att = None
    if out.attention is not None and mask is not None:
        att = attention_loss(out.attention.alpha, mask)
        total = total + att * weights["att"]
    parts = {
        "cls": cls.item(),
        "loc": loc.item() if loc is not None else 0.0,
        "att": att.item() if att is not None else 0.0,
        "total": total.item(),
    }
    return total, parts


@dataclass
class LossRecord:
    step: int
    total: float
    cls: float
    loc: float
    att: float
    lr: float
    positives: int


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def learning_rate(config: DetectorConfig, step: int) -> float:
    o = config.optimizer
    return o.lr * o.decay_factor ** (step // o.decay_step) if o.decay_step > 0 else o.lr


def frozen_names(config: DetectorConfig) -> set[str]:
    convs = [layer.name for layer in config.backbone if layer.kind == "conv"]
    return {f"backbone.{n}.{s}" for n in convs[: config.optimizer.freeze_layers] for s in ("w", "b")}


def train_step(batch: Sequence[SceneSample], params: ModelParams, state: OptimizerState,
               config: DetectorConfig, anchors: AnchorSet | None = None) -> LossRecord:
    """One SGD-with-momentum step (v <- mu*v - lr*g; p <- p + v), in place on ``params``."""
    if not batch:
        raise ValueError("empty batch")
    anchors = anchors or generate_default_boxes(config.anchor_specs(), config.input_size)
    frozen = frozen_names(config)
    for name, t in params.items():
        t.requires_grad = name not in frozen
        t.grad = None
    x = image_batch([s.image for s in batch], config.dtype)
    out = forward(x, params, config)
    targets = compute_targets(out, batch, anchors, config)
    mask = np.stack([s.mask for s in batch]) if config.attention.enabled else None
    loss, parts = total_loss(out, targets, mask, config.loss_weights, config.cls_normalization)
    if not all(math.isfinite(v) for v in parts.values()):
        raise NonFiniteLossError(state.step, parts)
    loss.backward()
    lr = learning_rate(config, state.step)
    mu = config.optimizer.momentum
    for name, t in params.items():
        if t.grad is None or name in frozen:
            continue
        v = state.velocity.get(name)
        v = -lr * t.grad if v is None else mu * v - lr * t.grad
        state.velocity[name] = v.astype(t.dtype, copy=False)
        t.data = t.data + state.velocity[name]
        t.grad = None
    record = LossRecord(state.step, parts["total"], parts["cls"], parts["loc"], parts["att"], lr,
                        sum(t.positive_count for t in targets))
    state.step += 1
    return record


class Trainer:
    """Epoch-shuffled minibatch training over a fixed list of samples."""

    def __init__(self, config: DetectorConfig, samples: Sequence[SceneSample], seed: int = 0,
                 params: ModelParams | None = None):
        if not samples:
            raise ValueError("no training samples")
        self.config = config
        self.samples = list(samples)
        self.rng = np.random.default_rng(seed)
        self.params = params if params is not None else init_params(config, seed)
        self.state = OptimizerState()
        self.anchors = generate_default_boxes(config.anchor_specs(), config.input_size)
        self.history: list[LossRecord] = []
        self._order: list[int] = []

    def _next_batch(self) -> list[SceneSample]:
        bs = self.config.optimizer.batch_size
        batch = []
        while len(batch) < bs:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.samples)))
            batch.append(self.samples[self._order.pop()])
        if self.config.augment.enabled:
            batch = [augment_sample(s, self.rng, self.config) for s in batch]
        return batch

    def step(self) -> LossRecord:
        rec = train_step(self._next_batch(), self.params, self.state, self.config, self.anchors)
        self.history.append(rec)
        return rec

    def run(self, steps: int, log_every: int = 100) -> Iterator[LossRecord]:
        for _ in range(steps):
            rec = self.step()
            if log_every and rec.step % log_every == 0:
                log.info("step %d loss %.4f (cls %.4f loc %.4f att %.4f)", rec.step, rec.total, rec.cls, rec.loc, rec.att)
            yield rec


# -- augmentation -----------------------------------------------------------

def mirror_sample(sample: SceneSample) -> SceneSample:
    """Horizontal flip of image, mask and boxes."""
    size = sample.image.shape[2]
    boxes = [OrientedBox(size - b.cx, b.cy, b.w, b.h, normalize_angle(-b.theta)) for b in sample.boxes]
    return SceneSample(sample.image[:, :, ::-1].copy(), boxes, sample.mask[:, ::-1].copy(), sample.name)


def _crop_resize(arr: np.ndarray, x0: float, y0: float, side: float, out: int, nearest: bool) -> np.ndarray:
    """Resample the square window ``[x0, x0+side) x [y0, y0+side)`` of a ``(C, H, W)`` array to ``out`` px."""
    c, h, w = arr.shape
    centres = (np.arange(out) + 0.5) * side / out
    sx, sy = x0 + centres, y0 + centres
    if nearest:
        ix = np.clip(np.floor(sx).astype(int), 0, w - 1)
        iy = np.clip(np.floor(sy).astype(int), 0, h - 1)
        return arr[:, iy][:, :, ix]
    fx, fy = np.clip(sx - 0.5, 0, w - 1), np.clip(sy - 0.5, 0, h - 1)
    x_lo, y_lo = np.floor(fx).astype(int), np.floor(fy).astype(int)
    x_hi, y_hi = np.minimum(x_lo + 1, w - 1), np.minimum(y_lo + 1, h - 1)
    ax, ay = fx - x_lo, fy - y_lo
    rows = arr[:, y_lo] * (1 - ay)[None, :, None] + arr[:, y_hi] * ay[None, :, None]
    return rows[:, :, x_lo] * (1 - ax) + rows[:, :, x_hi] * ax


def sample_patch(sample: SceneSample, rng, config: DetectorConfig):
    """Pick a square patch meeting a randomly drawn minimum overlap with some word.

    Returns ``(x0, y0, side, min_overlap, achieved_overlap)``; after
    ``max_trials`` failures the whole image is returned with
    ``achieved_overlap = None``.
    """
    size = sample.image.shape[2]
    aug = config.augment
    min_iou = float(rng.choice(aug.min_overlaps))
    rects = enclosing_rects(sample.box_array()) if sample.boxes else np.zeros((0, 4))
    for _ in range(aug.max_trials if len(rects) else 0):
        side = size * rng.uniform(0.3, 1.0)
        x0 = rng.uniform(0, size - side)
        y0 = rng.uniform(0, size - side)
        patch = np.array([[x0 + side / 2, y0 + side / 2, side, side]])
        ious = iou_matrix_aligned(patch, rects)[0]
        if ious.max() < min_iou:
            continue
        cx, cy = rects[:, 0], rects[:, 1]
        keep = (cx > x0) & (cx < x0 + side) & (cy > y0) & (cy < y0 + side)
        if not keep.any():
            continue
        return x0, y0, side, min_iou, float(ious.max())
    return 0.0, 0.0, float(size), min_iou, None


def augment_sample(sample: SceneSample, rng, config: DetectorConfig) -> SceneSample:
    """Patch sampling, resize to the input size, random mirror and colour jitter."""
    out_size = config.input_size
    aug = config.augment
    x0, y0, side, _, _ = sample_patch(sample, rng, config)
    scale = out_size / side
    image = _crop_resize(sample.image, x0, y0, side, out_size, nearest=False)
    mask = _crop_resize(sample.mask[None], x0, y0, side, out_size, nearest=True)[0]
    boxes = []
    for b in sample.boxes:
        if x0 < b.cx < x0 + side and y0 < b.cy < y0 + side:
            boxes.append(OrientedBox((b.cx - x0) * scale, (b.cy - y0) * scale, b.w * scale, b.h * scale, b.theta))
    out = SceneSample(image.astype(np.float32), boxes, mask.astype(np.uint8), sample.name)
    if aug.mirror and rng.random() < 0.5:
        out = mirror_sample(out)
    if aug.color:
        img = out.image
        if rng.random() < 0.5:
            img = img + rng.uniform(-32 / 255, 32 / 255)
        if rng.random() < 0.5:
            mean = img.mean()
            img = (img - mean) * rng.uniform(0.8, 1.25) + mean
        out.image = np.clip(img, 0.0, 1.0).astype(np.float32)
    return out


# -- inference --------------------------------------------------------------

def _clip_box(row: np.ndarray, size: int) -> np.ndarray | None:
    cx, cy, w, h, theta = row
    w, h = min(w, 2.0 * size), min(h, 2.0 * size)
    if theta == 0.0:
        x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, size)
        y0, y1 = max(cy - h / 2, 0.0), min(cy + h / 2, size)
        if x1 - x0 <= 1e-6 or y1 - y0 <= 1e-6:
            return None
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, 0.0])
    cx, cy = min(max(cx, 0.0), size), min(max(cy, 0.0), size)
    if not (w > 1e-6 and h > 1e-6):
        return None
    return np.array([cx, cy, w, h, theta])


def detect(image, params: Mapping[str, Tensor], config: DetectorConfig, conf_threshold: float | None = None,
           nms_threshold: float | None = None, anchors: AnchorSet | None = None,
           return_attention: bool = False):
    """Score, threshold, decode, clip and suppress.

    ``image`` is a single ``(3, S, S)`` array in [0, 1] or a prepared
    ``(1, 3, S, S)`` Tensor.
    """
    inf = config.inference
    conf = inf.conf_threshold if conf_threshold is None else conf_threshold
    thr = inf.nms_threshold if nms_threshold is None else nms_threshold
    anchors = anchors or generate_default_boxes(config.anchor_specs(), config.input_size)
    x = image if isinstance(image, Tensor) else image_batch([image], config.dtype)
    for t in params.values():
        t.requires_grad = False
    out = forward(x, params, config)
    logits = out.cls_flat.data[0].astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    scores = p[:, 1] / p.sum(axis=1)
    keep = np.flatnonzero(scores >= conf)
    keep = keep[np.argsort(-scores[keep], kind="stable")][: inf.top_k]
    decoded = decode_array(out.loc_flat.data[0][keep].astype(np.float64), anchors.boxes[keep])
    dets = []
    for row, s in zip(decoded, scores[keep]):
        if not np.all(np.isfinite(row)):
            continue
        clipped = _clip_box(row, config.input_size)
        if clipped is not None:
            dets.append(Detection(OrientedBox.from_array(clipped), float(min(max(s, 0.0), 1.0))))
    result = nms(dets, thr, rotated=inf.rotated_nms)
    if return_attention:
        alpha = out.attention.alpha_pos.data[0, 0] if out.attention is not None else None
        return result, alpha
    return result

