"""Four-branch dilated inception block and cross-layer feature aggregation."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor, channel_concat, conv2d, maxpool2d, relu, resize_bilinear, ShapeError

__all__ = ["BRANCHES", "init_inception", "inception_block", "init_aif", "aggregate_aif", "branch_slices"]

BRANCHES = ("b1", "b3", "pool", "b5")


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_params(rng, cout, cin, kh, kw, dtype) -> dict[str, np.ndarray]:
    return {"w": _he(rng, (cout, cin, kh, kw), dtype), "b": np.zeros((1, cout, 1, 1), dtype=dtype)}


def init_inception(rng, in_channels: int, width: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights for a block whose four branches each emit ``width // 4`` channels."""
    if width % 4:
        raise ValueError(f"inception width {width} is not divisible by 4")
    bw = width // 4
    layers = {
        "b1": (1, 1, in_channels),
        "b3": (3, 3, in_channels),
        "pool": (1, 1, in_channels),
        "b5a": (1, 5, in_channels),
        "b5b": (5, 1, bw),
    }
    out = {}
    for name, (kh, kw, cin) in layers.items():
        for k, v in _conv_params(rng, bw, cin, kh, kw, dtype).items():
            out[f"{name}.{k}"] = v
    return out


def inception_block(x: Tensor, params: Mapping[str, Tensor], dilation: int = 2) -> Tensor:
    """Concat of 1x1, dilated 3x3, 3x3-pool + 1x1 and dilated 1x5 -> 5x1 branches.

    Every branch preserves the spatial size; output channels are four times
    the branch width, in the order of ``BRANCHES``.
    """
    cin = params["b1.w"].shape[1]
    if x.shape[1] != cin:
        raise ShapeError("inception_block", "input channels", cin, x.shape[1])
    d = dilation
    b1 = relu(conv2d(x, params["b1.w"], params["b1.b"]))
    b3 = relu(conv2d(x, params["b3.w"], params["b3.b"], pad=d, dilation=d))
    bp = relu(conv2d(maxpool2d(x, 3, 1, 1), params["pool.w"], params["pool.b"]))
    b5 = relu(conv2d(x, params["b5a.w"], params["b5a.b"], pad=(0, 2 * d), dilation=d))
    b5 = relu(conv2d(b5, params["b5b.w"], params["b5b.b"], pad=(2 * d, 0), dilation=d))
    return channel_concat([b1, b3, bp, b5])


def branch_slices(width: int) -> dict[str, slice]:
    bw = width // 4
    return {name: slice(k * bw, (k + 1) * bw) for k, name in enumerate(BRANCHES)}


def init_aif(rng, in_channels: int, out_channels: int, dtype=np.float32) -> dict[str, np.ndarray]:
    return {f"proj.{k}": v for k, v in _conv_params(rng, out_channels, in_channels, 1, 1, dtype).items()}


def aggregate_aif(lower: Tensor | None, current: Tensor, higher: Tensor | None,
                  params: Mapping[str, Tensor]) -> Tensor:
    """Fuse a layer's inception features with its neighbours at the current resolution.

    ``lower`` (twice the resolution) is max-pooled by 2, ``higher`` (half the
    resolution) is bilinearly upsampled by 2, the available maps are
    concatenated as lower, current, higher and projected by a 1x1 conv.
    Either neighbour may be None at the ends of the pyramid.
    """
    h, w = current.shape[2:]
    parts = []
    if lower is not None:
        if lower.shape[2:] != (2 * h, 2 * w):
            raise ShapeError("aggregate_aif", "lower resolution", (2 * h, 2 * w), lower.shape[2:])
        parts.append(maxpool2d(lower, 2, 2))
    parts.append(current)
    if higher is not None:
        expected = ((h + 1) // 2, (w + 1) // 2)
        if higher.shape[2:] != expected:
            raise ShapeError("aggregate_aif", "higher resolution", expected, higher.shape[2:])
        parts.append(resize_bilinear(higher, (h, w)))
    fused = channel_concat(parts)
    if fused.shape[1] != params["proj.w"].shape[1]:
        raise ShapeError("aggregate_aif", "concatenated channels", params["proj.w"].shape[1], fused.shape[1])
    return relu(conv2d(fused, params["proj.w"], params["proj.b"]))
