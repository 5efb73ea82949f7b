"""Neural-network kernels on top of :mod:`msroi.tensor`.

Convolution is cross-correlation with zero padding, computed through an
im2col buffer laid out as (C, kh, kw, N, Ho, Wo) so both passes are single
matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, make_op


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw, self.stride, self.dilation) < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @classmethod
    def same(cls, in_channels, out_channels, k=3, dilation=1):
        """Stride-1 spec whose output keeps the input's spatial size (odd k)."""
        if k % 2 == 0:
            raise ValueError("same-size padding needs an odd kernel")
        return cls(in_channels, out_channels, (k, k), 1, dilation, dilation * (k - 1) // 2)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        return ho, wo


def _windows(kh, kw, dil, stride, ho, wo):
    for i in range(kh):
        for j in range(kw):
            hs, ws = i * dil, j * dil
            yield i, j, (slice(None), slice(None),
                         slice(hs, hs + stride * (ho - 1) + 1, stride),
                         slice(ws, ws + stride * (wo - 1) + 1, stride))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: Conv2dSpec) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {list(x.shape)}")
    n, c, h, w = x.shape
    kh, kw = spec.kernel
    o = spec.out_channels
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != (o, c, kh, kw):
        raise ShapeError(f"conv2d: weight shape {list(weight.shape)} != {[o, c, kh, kw]}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {list(bias.shape)} != {[o]}")
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} for input {h}x{w} and {spec}")

    p, dil, s = spec.padding, spec.dilation, spec.stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i, j, win in _windows(kh, kw, dil, s, ho, wo):
        cols[:, i, j] = xp[win].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, ho, wo) + bias.data[:, None, None, None]
    out = out.transpose(1, 0, 2, 3)
    want_x = x.requires_grad

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if want_x:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape)
            for i, j, win in _windows(kh, kw, dil, s, ho, wo):
                gxp[win] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb

    return make_op("conv2d", out, (x, weight, bias), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be [N,C,H,W], got {list(x.shape)}")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    return make_op("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] * inv, (n, c, h, w)).copy(),))


def _bilinear_taps(size_in: int, size_out: int):
    """Source indices and weights for half-pixel-centre linear interpolation."""
    scale = size_in / size_out
    src = np.maximum((np.arange(size_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), size_in - 1)
    i1 = np.minimum(i0 + 1, size_in - 1)
    return i0, i1, src - i0


def bilinear_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Row-stochastic [size_out, size_in] interpolation matrix."""
    i0, i1, lam = _bilinear_taps(size_in, size_out)
    m = np.zeros((size_out, size_in))
    rows = np.arange(size_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def _lerp_axis(a: np.ndarray, axis: int, size_out: int) -> np.ndarray:
    i0, i1, lam = _bilinear_taps(a.shape[axis], size_out)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = size_out
    # lo + t*(hi - lo) keeps constants exact
    return lo + lam.reshape(shape) * (hi - lo)


def resize_array(a: np.ndarray, target) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array."""
    h2, w2 = int(target[0]), int(target[1])
    if a.shape[-2:] == (h2, w2):
        return a
    return _lerp_axis(_lerp_axis(a, a.ndim - 2, h2), a.ndim - 1, w2)


def resize_bilinear(x: Tensor, target: tuple[int, int]) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"resize_bilinear input must be [N,C,H,W], got {list(x.shape)}")
    h2, w2 = int(target[0]), int(target[1])
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"resize target must be positive, got {target}")
    h, w = x.shape[2:]
    if (h2, w2) == (h, w):
        return make_op("resize_identity", x.data, (x,), lambda g: (g,))
    out = resize_array(x.data, (h2, w2))
    ah = bilinear_matrix(h, h2)
    aw = bilinear_matrix(w, w2)
    return make_op("resize_bilinear", out, (x,),
                   lambda g: (np.einsum("ph,ncpq,qw->nchw", ah, g, aw, optimize=True),))


def concat_channels(inputs) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {list(t.shape)} incompatible with {list(ref)}")
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)
    return make_op("concat_channels", out, inputs,
                   lambda g: [g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs))])


def concat_features(inputs) -> Tensor:
    """Concatenate [N,Di] feature vectors along the feature axis."""
    inputs = list(inputs)
    n = inputs[0].shape[0]
    for t in inputs:
        if t.data.ndim != 2 or t.shape[0] != n:
            raise ShapeError(f"concat_features: {list(t.shape)} incompatible")
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)
    return make_op("concat_features", out, inputs,
                   lambda g: [g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs))])


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {list(x.shape)} vs weight {list(weight.shape)}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {list(bias.shape)} vs weight {list(weight.shape)}")
    xd, wd = x.data, weight.data
    return make_op("dense", xd @ wd.T + bias.data, (x, weight, bias),
                   lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.size or labels.size == 0:
        raise ShapeError(f"softmax_cross_entropy: logits {list(logits.shape)} vs {labels.size} labels")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    probs = np.exp(z - log_norm[:, None])

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return make_op("softmax_cross_entropy", np.asarray(loss), (logits,), bw)


def fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform in +-sqrt(6 / fan_in), fan_in = product of all but the first axis."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
