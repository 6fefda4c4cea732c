"""Text attention: a pixel-wise text probability map learned from the first
aggregated feature map, used to gate prediction features.

Pipeline: two 3x3 convs (pad 1, relu) -> transposed conv upsampling back to
input resolution -> 1x1 projection to two channels -> channel softmax. The
text channel is resized (bilinear) to every gated layer and multiplied into
its features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    bilinear_kernel,
    channel_slice,
    channel_softmax,
    conv2d,
    elementwise_scale,
    probability_nll,
    relu,
    resize_bilinear,
    transposed_conv2d,
)

__all__ = ["AttentionMaps", "init_attention", "compute_attention", "encode_attention", "attention_loss"]


@dataclass
class AttentionMaps:
    alpha: Tensor  # (N, 2, H, W): background, text
    alpha_pos: Tensor  # (N, 1, H, W)
    resized: dict[str, Tensor] = field(default_factory=dict)


def init_attention(rng, in_channels: int, width: int, factor: int, dtype=np.float32) -> dict[str, np.ndarray]:
    def he(shape):
        bound = np.sqrt(6.0 / int(np.prod(shape[1:])))
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return {
        "conv1.w": he((width, in_channels, 3, 3)),
        "conv1.b": np.zeros((1, width, 1, 1), dtype),
        "conv2.w": he((width, width, 3, 3)),
        "conv2.b": np.zeros((1, width, 1, 1), dtype),
        "deconv.w": bilinear_kernel(width, factor, dtype),
        "deconv.b": np.zeros((1, width, 1, 1), dtype),
        # zero projection: the untrained map is 0.5 everywhere
        "proj.w": np.zeros((2, width, 1, 1), dtype),
        "proj.b": np.zeros((1, 2, 1, 1), dtype),
    }


def compute_attention(f_aif1: Tensor, params: Mapping[str, Tensor], input_size: int,
                      layer_sizes: Mapping[str, tuple[int, int]] | None = None) -> AttentionMaps:
    h = f_aif1.shape[2]
    factor = input_size // h
    if factor * h != input_size or factor * f_aif1.shape[3] != input_size:
        raise ShapeError("compute_attention", "input/feature stride ratio", f"divisor of {input_size}", f_aif1.shape[2:])
    if params["deconv.w"].shape[2] != 2 * factor:
        raise ShapeError("compute_attention", "upsampling kernel", 2 * factor, params["deconv.w"].shape[2])
    x = relu(conv2d(f_aif1, params["conv1.w"], params["conv1.b"], pad=1))
    x = relu(conv2d(x, params["conv2.w"], params["conv2.b"], pad=1))
    d = transposed_conv2d(x, params["deconv.w"], factor, params["deconv.b"])
    logits = conv2d(d, params["proj.w"], params["proj.b"])
    alpha = channel_softmax(logits)
    alpha_pos = channel_slice(alpha, 1, 2)
    maps = AttentionMaps(alpha, alpha_pos)
    for name, size in (layer_sizes or {}).items():
        maps.resized[name] = resize_bilinear(alpha_pos, size)
    return maps


def encode_attention(features: Tensor, maps: AttentionMaps, layer_name: str) -> Tensor:
    if layer_name not in maps.resized:
        raise KeyError(f"no resized attention map for layer {layer_name!r}")
    return elementwise_scale(features, maps.resized[layer_name])


def attention_loss(alpha: Tensor, mask) -> Tensor:
    """Mean pixel-wise cross-entropy between the two-channel map and a binary text mask."""
    mask = np.asarray(mask)
    if mask.ndim == 4:
        mask = mask[:, 0]
    if mask.ndim == 2:
        mask = mask[None]
    expected = (alpha.shape[0],) + alpha.shape[2:]
    if mask.shape != expected:
        raise ShapeError("attention_loss", "mask size", expected, mask.shape)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return probability_nll(alpha, mask.astype(np.int64))
