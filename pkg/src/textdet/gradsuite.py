"""Finite-difference oracle suite over every differentiable op and the composed modules.

Each check builds small random 64-bit inputs from a seed, reduces the op
output to a scalar and returns the worst relative error reported by
:func:`textdet.tensor.gradcheck`.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import attention_loss, compute_attention, encode_attention
from .inception import aggregate_aif, inception_block, init_aif, init_inception
from .tensor import Tensor, gradcheck

__all__ = ["CheckResult", "CHECKS", "run_suite", "TOLERANCE", "COMPOSED_TOLERANCE"]

TOLERANCE = 1e-5
COMPOSED_TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def _conv(rng):
    x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 1, 4, 1, 1)
    return gradcheck(lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1), [x, w, b])


def _conv_dilated(rng):
    x, w, b = _t(rng, 1, 2, 7, 7), _t(rng, 3, 2, 1, 3), _t(rng, 1, 3, 1, 1)
    return gradcheck(lambda x, w, b: T.conv2d(x, w, b, pad=(0, 2), dilation=2), [x, w, b])


def _deconv(rng):
    x, w, b = _t(rng, 1, 2, 3, 3), _t(rng, 2, 3, 4, 4), _t(rng, 1, 3, 1, 1)
    return gradcheck(lambda x, w, b: T.transposed_conv2d(x, w, 2, b), [x, w, b])


def _maxpool(rng):
    x = _t(rng, 1, 2, 6, 6)
    return max(gradcheck(lambda x: T.maxpool2d(x, 3, 1, 1), [x]),
               gradcheck(lambda x: T.maxpool2d(x, 2, 2), [x]))


def _concat(rng):
    a, b, c = _t(rng, 1, 2, 3, 3), _t(rng, 1, 1, 3, 3), _t(rng, 1, 3, 3, 3)
    return gradcheck(lambda a, b, c: T.channel_concat([a, b, c]), [a, b, c])


def _slice(rng):
    x = _t(rng, 2, 4, 3, 3)
    return gradcheck(lambda x: T.channel_slice(x, 1, 3), [x])


def _softmax(rng):
    x = _t(rng, 2, 3, 3, 3, scale=2.0)
    return gradcheck(T.channel_softmax, [x])


def _scale(rng):
    f, g = _t(rng, 2, 3, 4, 4), Tensor(rng.uniform(0.1, 1.0, (2, 1, 4, 4)))
    return gradcheck(T.elementwise_scale, [f, g])


def _relu(rng):
    x = _t(rng, 1, 2, 4, 4)
    return gradcheck(T.relu, [x])


def _resize(rng):
    x = _t(rng, 1, 2, 3, 4)
    return max(gradcheck(lambda x: T.resize_bilinear(x, (7, 5)), [x]),
               gradcheck(lambda x: T.resize_bilinear(x, (2, 2)), [x]))


def _smooth_l1(rng):
    pred = Tensor(rng.uniform(-3, 3, (4, 5)))
    target = rng.uniform(-1, 1, (4, 5))
    weights = (rng.random((4, 5)) < 0.7).astype(float)
    eps = 1e-5
    near_kink = np.abs(np.abs(pred.data - target) - 1.0) < 10 * eps
    return gradcheck(lambda p: T.smooth_l1(p, target, weights), [pred], eps=eps, skip=[near_kink])


def _cross_entropy(rng):
    logits = _t(rng, 2, 2, 3, 3, scale=2.0)
    labels = rng.integers(-1, 2, (2, 3, 3))
    labels[0, 0, 0] = 1
    return gradcheck(lambda z: T.softmax_cross_entropy(z, labels), [logits])


def _nll(rng):
    logits = _t(rng, 1, 2, 4, 4)
    labels = rng.integers(0, 2, (1, 4, 4))
    return gradcheck(lambda z: T.probability_nll(T.channel_softmax(z), labels), [logits])


def _arith(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 3)
    return gradcheck(lambda a, b: ((a * b - a) * 0.5 + b / 3.0).transpose(1, 0).reshape(6).sum(), [a, b])


def _attention(rng):
    width, factor = 3, 4
    f = _t(rng, 1, 4, 4, 4)
    p = {
        "conv1.w": _t(rng, width, 4, 3, 3, scale=0.5), "conv1.b": _t(rng, 1, width, 1, 1, scale=0.1),
        "conv2.w": _t(rng, width, width, 3, 3, scale=0.5), "conv2.b": _t(rng, 1, width, 1, 1, scale=0.1),
        "deconv.w": Tensor(T.bilinear_kernel(width, factor) + 0.1 * rng.standard_normal((width, width, 8, 8))),
        "deconv.b": _t(rng, 1, width, 1, 1, scale=0.1),
        "proj.w": _t(rng, 2, width, 1, 1), "proj.b": _t(rng, 1, 2, 1, 1, scale=0.1),
    }
    feats = {"a": _t(rng, 1, 3, 4, 4), "b": _t(rng, 1, 3, 2, 2)}
    mask = (rng.random((1, 16, 16)) < 0.4).astype(np.uint8)
    names = list(p)
    proj_a, proj_b = rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 3, 2, 2))

    def fn(f, *weights):
        maps = compute_attention(f, dict(zip(names, weights)), 16, {"a": (4, 4), "b": (2, 2)})
        ea = encode_attention(feats["a"], maps, "a") * Tensor(proj_a)
        eb = encode_attention(feats["b"], maps, "b") * Tensor(proj_b)
        return ea.sum() + eb.sum() + attention_loss(maps.alpha, mask)

    return gradcheck(fn, [f] + [p[n] for n in names])


def _inception(rng):
    x = _t(rng, 1, 4, 6, 6)
    p = {k: Tensor(v + (0.1 * rng.standard_normal(v.shape) if k.endswith(".b") else 0))
         for k, v in init_inception(rng, 4, 8, np.float64).items()}
    names = list(p)

    def fn(x, *weights):
        return inception_block(x, dict(zip(names, weights)), dilation=2)

    return gradcheck(fn, [x] + [p[n] for n in names])


def _aif(rng):
    lower, cur, higher = _t(rng, 1, 3, 8, 8), _t(rng, 1, 3, 4, 4), _t(rng, 1, 3, 2, 2)
    p = {k: Tensor(v + 0.1 * rng.standard_normal(v.shape)) for k, v in init_aif(rng, 9, 4, np.float64).items()}
    names = list(p)

    def fn(lo, c, hi, *weights):
        return aggregate_aif(lo, c, hi, dict(zip(names, weights)))

    return gradcheck(fn, [lower, cur, higher] + [p[n] for n in names])


CHECKS: dict[str, tuple[Callable, float]] = {
    "conv2d": (_conv, TOLERANCE),
    "conv2d_dilated": (_conv_dilated, TOLERANCE),
    "transposed_conv2d": (_deconv, TOLERANCE),
    "maxpool2d": (_maxpool, TOLERANCE),
    "channel_concat": (_concat, TOLERANCE),
    "channel_slice": (_slice, TOLERANCE),
    "channel_softmax": (_softmax, TOLERANCE),
    "elementwise_scale": (_scale, TOLERANCE),
    "relu": (_relu, TOLERANCE),
    "resize_bilinear": (_resize, TOLERANCE),
    "smooth_l1": (_smooth_l1, TOLERANCE),
    "softmax_cross_entropy": (_cross_entropy, TOLERANCE),
    "probability_nll": (_nll, TOLERANCE),
    "tensor_arithmetic": (_arith, TOLERANCE),
    "attention": (_attention, COMPOSED_TOLERANCE),
    "inception": (_inception, COMPOSED_TOLERANCE),
    "aif": (_aif, COMPOSED_TOLERANCE),
}


def run_suite(seeds=(0,), names=None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        fn, tol = CHECKS[name]
        for seed in seeds:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            results.append(CheckResult(name, int(seed), float(fn(rng)), tol))
    return results
