"""Dense NCHW tensors with a small reverse-mode gradient engine.

Only the operations the detector composes are provided. Every op is a pure
function of its inputs; when any input requires a gradient, the output keeps
a reference to its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks that graph in reverse
topological order and accumulates into ``.grad``.

Convolutions use an im2col layout: padded input is viewed through
``as_strided`` as ``(N, C, kh, kw, Ho, Wo)`` windows and contracted with the
weight matrix, so conv, transposed conv and their gradients all share the
same two helpers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "ConvSpec",
    "ShapeError",
    "GradcheckError",
    "conv2d",
    "transposed_conv2d",
    "bilinear_kernel",
    "maxpool2d",
    "channel_concat",
    "concat",
    "channel_slice",
    "channel_softmax",
    "elementwise_scale",
    "relu",
    "resize_bilinear",
    "smooth_l1",
    "softmax_cross_entropy",
    "probability_nll",
    "gradcheck",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""

    def __init__(self, op: str, dimension: str, expected, got):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {dimension} mismatch (expected {expected}, got {got})")


class GradcheckError(RuntimeError):
    pass


class Tensor:
    """A numpy array plus an optional gradient buffer and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError("Tensor", "dimension", ">= 1", arr.shape)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # elementwise arithmetic, same-shape or python scalar operands only

    def __add__(self, other):
        if isinstance(other, Tensor):
            _same_shape("add", self, other)
            return _result(self.data + other.data, (self, other), lambda g: (g, g))
        return _result(self.data + other, (self,), lambda g: (g,))

    __radd__ = __add__

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _same_shape("mul", self, other)
            a, b = self.data, other.data
            return _result(a * b, (self, other), lambda g: (g * b, g * a))
        return _result(self.data * other, (self,), lambda g: (g * other,))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return self * (1.0 / other)

    def sum(self) -> "Tensor":
        shape = self.shape
        return _result(np.asarray(self.data.sum()), (self,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        inv = np.argsort(axes)
        return _result(
            np.ascontiguousarray(self.data.transpose(axes)), (self,), lambda g: (g.transpose(inv),)
        )


def _result(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, "shape", a.shape, b.shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _check_4d(op: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise ShapeError(op, "rank", 4, t.ndim)


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for field in ("kernel", "stride", "pad", "dilation"):
            object.__setattr__(self, field, _pair(getattr(self, field)))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError(f"kernel, stride and dilation must be >= 1: {self}")
        if min(self.pad) < 0:
            raise ValueError(f"padding must be >= 0: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be >= 1: {self}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.pad, self.dilation
        ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError("conv2d", "output size", ">= 1", (ho, wo))
        return ho, wo


def _windows(xp: np.ndarray, kh, kw, sh, sw, dh, dw, ho, wo) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, dh * s2, dw * s3, sh * s2, sw * s3),
        writeable=False,
    )


def _im2col(xp, kh, kw, sh, sw, dh, dw, ho, wo) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*kh*kw, N*Ho*Wo)"""
    win = _windows(xp, kh, kw, sh, sw, dh, dw, ho, wo)
    c = xp.shape[1]
    return win.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, -1)


def _col2im(cols, shape, kh, kw, sh, sw, dh, dw, ho, wo) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (C*kh*kw, N*Ho*Wo) into a zero (N, C, Hp, Wp)."""
    n, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dh, j * dw
            out[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw] += cols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None,
           *, stride=1, pad=0, dilation=1) -> Tensor:
    """2-D cross-correlation with zero padding, stride and dilation.

    ``weight`` is ``(out_channels, in_channels, kh, kw)``. ``bias`` may be a
    vector of length ``out_channels`` or any array broadcastable to
    ``(1, out_channels, 1, 1)``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_4d("conv2d", x)
    _check_4d("conv2d weights", weight)
    co, ci, kh, kw = weight.shape
    if spec is None:
        spec = ConvSpec((kh, kw), stride, pad, dilation, ci, co)
    if spec.kernel != (kh, kw):
        raise ShapeError("conv2d", "kernel", spec.kernel, (kh, kw))
    if spec.in_channels != ci or spec.out_channels != co:
        raise ShapeError("conv2d", "weight channels", (spec.out_channels, spec.in_channels), (co, ci))
    n, c, h, w = x.shape
    if c != ci:
        raise ShapeError("conv2d", "input channels", ci, c)
    ho, wo = spec.output_size(h, w)
    (sh, sw), (ph, pw), (dh, dw) = spec.stride, spec.pad, spec.dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = _im2col(xp, kh, kw, sh, sw, dh, dw, ho, wo)
    wmat = weight.data.reshape(co, -1)
    out = (wmat @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.size != co:
            raise ShapeError("conv2d", "bias length", co, bias.data.size)
        out = out + bias.data.reshape(1, co, 1, 1)
        parents = parents + (bias,)
    out = np.ascontiguousarray(out)
    xp_shape = xp.shape

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ gmat, xp_shape, kh, kw, sh, sw, dh, dw, ho, wo)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)).reshape(bias.shape),)
        return grads

    return _result(out, parents, backward)


def bilinear_kernel(channels: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Per-channel bilinear upsampling weights of size ``2*factor``.

    Shaped ``(channels, channels, 2f, 2f)`` for :func:`transposed_conv2d`,
    diagonal over channels.
    """
    size = 2 * factor
    center = factor - 0.5
    og = np.arange(size)
    filt1d = 1.0 - np.abs(og - center) / factor
    filt = np.outer(filt1d, filt1d)
    w = np.zeros((channels, channels, size, size), dtype=dtype)
    w[np.arange(channels), np.arange(channels)] = filt
    return w


def transposed_conv2d(x: Tensor, weight: Tensor, factor: int, bias: Tensor | None = None) -> Tensor:
    """Stride-``factor`` transposed convolution with kernel ``2*factor``.

    The full transposed output ``(H+1)*factor`` is cropped by ``factor//2`` on
    the leading edge so the result is exactly ``H*factor`` by ``W*factor``.
    ``weight`` is ``(in_channels, out_channels, 2f, 2f)``.
    """
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_4d("transposed_conv2d", x)
    _check_4d("transposed_conv2d weights", weight)
    ci, co, kh, kw = weight.shape
    k = 2 * factor
    if (kh, kw) != (k, k):
        raise ShapeError("transposed_conv2d", "kernel", (k, k), (kh, kw))
    n, c, h, w = x.shape
    if c != ci:
        raise ShapeError("transposed_conv2d", "input channels", ci, c)
    f = factor
    full_shape = (n, co, (h - 1) * f + k, (w - 1) * f + k)
    crop = f // 2
    xmat = x.data.transpose(1, 0, 2, 3).reshape(ci, -1)
    wmat = weight.data.reshape(ci, -1)
    full = _col2im(wmat.T @ xmat, full_shape, k, k, f, f, 1, 1, h, w)
    out = np.ascontiguousarray(full[:, :, crop : crop + h * f, crop : crop + w * f])
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.size != co:
            raise ShapeError("transposed_conv2d", "bias length", co, bias.data.size)
        out = out + bias.data.reshape(1, co, 1, 1)
        parents = parents + (bias,)

    def backward(g):
        gfull = np.zeros(full_shape, dtype=g.dtype)
        gfull[:, :, crop : crop + h * f, crop : crop + w * f] = g
        gcols = _im2col(gfull, k, k, f, f, 1, 1, h, w)
        gx = (wmat @ gcols).reshape(ci, n, h, w).transpose(1, 0, 2, 3) if x.requires_grad else None
        gw = (xmat @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)).reshape(bias.shape),)
        return grads

    return _result(out, parents, backward)


def maxpool2d(x: Tensor, kernel, stride=None, pad=0) -> Tensor:
    """Max pooling; the backward pass routes to the first maximum in row-major window order."""
    x = _as_tensor(x)
    _check_4d("maxpool2d", x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(pad)
    if min(kh, kw, sh, sw) < 1:
        raise ValueError("pool kernel and stride must be >= 1")
    if ph >= kh or pw >= kw:
        raise ValueError(f"padding {ph, pw} >= kernel {kh, kw}: a window would lie entirely in padding")
    n, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("maxpool2d", "output size", ">= 1", (ho, wo))
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    win = _windows(xp, kh, kw, sh, sw, 1, 1, ho, wo).transpose(0, 1, 4, 5, 2, 3).reshape(n, c, ho, wo, -1)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    xp_shape = xp.shape

    def backward(g):
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for idx in range(kh * kw):
            i, j = divmod(idx, kw)
            gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += g * (arg == idx)
        return (gxp[:, :, ph : ph + h, pw : pw + w],)

    return _result(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    for k, t in enumerate(tensors[1:], start=1):
        if t.ndim != len(ref):
            raise ShapeError("concat", f"rank of input {k}", len(ref), t.ndim)
        for d in range(len(ref)):
            if d != axis % len(ref) and t.shape[d] != ref[d]:
                raise ShapeError("concat", f"axis {d} of input {k}", ref[d], t.shape[d])
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW maps along channels; n, h and w must agree."""
    names = ("batch", "channels", "height", "width")
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("channel_concat of an empty list")
    for t in tensors:
        _check_4d("channel_concat", t)
    n, _, h, w = tensors[0].shape
    for k, t in enumerate(tensors[1:], start=1):
        for d in (0, 2, 3):
            if t.shape[d] != (n, None, h, w)[d]:
                raise ShapeError("channel_concat", f"{names[d]} of input {k}", (n, None, h, w)[d], t.shape[d])
    return concat(tensors, axis=1)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    data = x.data[:, start:stop].copy()

    def backward(g):
        out = np.zeros_like(x.data)
        out[:, start:stop] = g
        return (out,)

    return _result(data, (x,), backward)


def channel_softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError("channel_softmax", "channels", ">= 2", x.shape[1] if x.ndim > 1 else None)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def elementwise_scale(features: Tensor, gate: Tensor) -> Tensor:
    """Multiply every channel of ``features`` pointwise by a one-channel ``gate``."""
    features, gate = _as_tensor(features), _as_tensor(gate)
    _check_4d("elementwise_scale", features)
    _check_4d("elementwise_scale gate", gate)
    if gate.shape[1] != 1:
        raise ShapeError("elementwise_scale", "gate channels", 1, gate.shape[1])
    if gate.shape[0] != features.shape[0]:
        raise ShapeError("elementwise_scale", "batch", features.shape[0], gate.shape[0])
    if gate.shape[2:] != features.shape[2:]:
        raise ShapeError("elementwise_scale", "spatial size", features.shape[2:], gate.shape[2:])
    f, m = features.data, gate.data
    return _result(f * m, (features, gate), lambda g: (g * m, (g * f).sum(axis=1, keepdims=True)))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Separable bilinear resize of the two trailing axes."""
    x = _as_tensor(x)
    _check_4d("resize_bilinear", x)
    ho, wo = size
    h, w = x.shape[2:]
    if (ho, wo) == (h, w):
        return _result(x.data.copy(), (x,), lambda g: (g,))
    ry = _interp_matrix(h, ho, x.dtype)
    rx = _interp_matrix(w, wo, x.dtype)
    out = ry @ x.data @ rx.T
    return _result(out, (x,), lambda g: (ry.T @ g @ rx,))


def smooth_l1(pred: Tensor, target, weights=None) -> Tensor:
    """Sum of 0.5*d**2 for |d| < 1 and |d| - 0.5 otherwise, d = pred - target.

    ``weights`` (same shape, optional) scales each element's contribution.
    """
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError("smooth_l1", "length", pred.shape, target.shape)
    d = pred.data - target
    a = np.abs(d)
    small = a < 1.0
    per = np.where(small, 0.5 * d * d, a - 0.5)
    dg = np.where(small, d, np.sign(d))
    if weights is not None:
        weights = np.asarray(weights, dtype=pred.dtype)
        per = per * weights
        dg = dg * weights
    return _result(np.asarray(per.sum()), (pred,), lambda g: (g * dg,))


def softmax_cross_entropy(logits: Tensor, labels, ignore_label: int = -1) -> Tensor:
    """Mean negative log-likelihood over positions whose label is not ``ignore_label``.

    ``logits`` has classes on axis 1 and ``labels`` the remaining axes, e.g.
    ``(N, K, H, W)`` with ``(N, H, W)``.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[1]
    expected = logits.shape[:1] + logits.shape[2:]
    if labels.shape != expected:
        raise ShapeError("softmax_cross_entropy", "label map", expected, labels.shape)
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"labels out of range [0, {k}) at {int(bad.sum())} positions")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every position is ignored")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, np.expand_dims(safe, 1), axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.expand_dims(safe, 1), 1.0, axis=1)
        return (g * (p - onehot) * np.expand_dims(valid, 1) / count,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def probability_nll(probs: Tensor, labels, floor: float = 1e-12) -> Tensor:
    """Mean of -log probs[label] where ``probs`` already sums to one over axis 1."""
    probs = _as_tensor(probs)
    labels = np.asarray(labels)
    expected = probs.shape[:1] + probs.shape[2:]
    if labels.shape != expected:
        raise ShapeError("probability_nll", "label map", expected, labels.shape)
    if ((labels < 0) | (labels >= probs.shape[1])).any():
        raise ValueError("labels out of range")
    idx = np.expand_dims(labels.astype(np.int64), 1)
    raw = np.take_along_axis(probs.data, idx, axis=1)
    picked = np.maximum(raw, floor)
    count = labels.size

    def backward(g):
        gp = np.zeros_like(probs.data)
        # the floor is flat, so clamped entries get no gradient
        np.put_along_axis(gp, idx, np.where(raw > floor, -1.0 / (picked * count), 0.0), axis=1)
        return (g * gp,)

    return _result(np.asarray(-np.log(picked).sum() / count, dtype=probs.dtype), (probs,), backward)


def _is_kink(fn, inputs, flat, i, eps, f0, fp, fm, ref, scalar) -> bool:
    """True when the one-sided slopes at ``flat[i]`` jump like a non-differentiable point.

    For a smooth function the jump between forward and backward differences
    grows linearly with the step; across a kink it stays put. Large jumps are
    taken as kinks outright, moderate ones are re-measured at twice the step.
    """
    dp, dm = (fp - f0) / eps, (f0 - fm) / eps
    jump = dp - dm
    scale = max(abs(dp), abs(dm), ref * 1e3)
    if abs(jump) > 1e-2 * scale:
        return True
    if abs(jump) <= 1e-5 * scale:
        return False
    orig = flat[i]
    flat[i] = orig + 2 * eps
    f2p = scalar(fn(*inputs))
    flat[i] = orig - 2 * eps
    f2m = scalar(fn(*inputs))
    flat[i] = orig
    jump2 = (f2p - f0) / (2 * eps) - (f0 - f2m) / (2 * eps)
    return abs(jump2 - 2 * jump) > 0.5 * abs(jump)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              skip: Sequence[np.ndarray | None] | None = None, detect_kinks: bool = True,
              seed: int = 0, return_details: bool = False):
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensors to an output tensor; non-scalar outputs are
    reduced with a fixed random projection. The relative error of an element
    is ``|a - n| / max(|a|, |n|, 1e-3 * max|a|)``, so elements whose gradient
    is negligible next to the largest one are compared on that scale.

    Elements flagged in ``skip`` are not checked. With ``detect_kinks`` an
    element is also skipped when its one-sided differences jump in a way no
    smooth function does, which happens only when a perturbation crosses or
    sits on a non-differentiable point (relu zero, max-pool tie).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise GradcheckError("gradcheck needs 64-bit inputs")
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    proj = None
    if out.data.size != 1:
        proj = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar(o: Tensor) -> float:
        v = float((o.data * proj).sum()) if proj is not None else float(o.data.reshape(-1)[0])
        if not np.isfinite(v):
            raise GradcheckError("non-finite value in gradcheck evaluation")
        return v

    f0 = scalar(out)
    out.backward(proj if proj is not None else None)
    worst = 0.0
    checked = skipped = 0
    for k, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise GradcheckError(f"non-finite analytic gradient for input {k}")
        ref = 1e-3 * float(np.abs(analytic).max()) + 1e-30
        flat = t.data.reshape(-1)
        mask = None if skip is None or skip[k] is None else np.asarray(skip[k]).reshape(-1)
        for i in range(flat.size):
            if mask is not None and mask[i]:
                skipped += 1
                continue
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar(fn(*inputs))
            flat[i] = orig - eps
            fm = scalar(fn(*inputs))
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            if detect_kinks and _is_kink(fn, inputs, flat, i, eps, f0, fp, fm, ref, scalar):
                skipped += 1
                continue
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), ref)
            worst = max(worst, err)
            checked += 1
    for t in inputs:
        t.grad = None
    if return_details:
        return worst, {"checked": checked, "skipped": skipped}
    return worst
