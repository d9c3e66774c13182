"""Neural network building blocks over the 4-D tensor core.

conv2d, pool2d, upsample_nearest, batch_norm, activation, and
concat_channels: each a single tape node with a hand-written backward.
Convolution is cross-correlation (no kernel flip) via im2col and one
matmul per batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, apply_op


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = int(v[0]), int(v[1])
    else:
        a = b = int(v)
    return a, b


@dataclass
class Conv2dParams:
    """Weights and geometry for one convolution.

    weight is (Cout, Cin, kH, kW); bias, when present, is stored
    (1, Cout, 1, 1) so it broadcasts like everything else here.
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.dilation = _pair(self.dilation)
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding[0] < 0 or self.padding[1] < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")
        if self.dilation[0] < 1 or self.dilation[1] < 1:
            raise ShapeError(f"dilation must be positive, got {self.dilation}")
        if self.bias is not None and self.bias.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"bias channels {self.bias.shape[1]} != weight Cout {self.weight.shape[0]}")


def conv_out_extent(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _conv_geometry(x_shape, w_shape, stride, pad, dilation):
    n, c, h, w = x_shape
    cout, cin, kh, kw = w_shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weight expects {cin}")
    ho = conv_out_extent(h, kh, stride[0], pad[0], dilation[0])
    wo = conv_out_extent(w, kw, stride[1], pad[1], dilation[1])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv output {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}, dilation {dilation}")
    return n, c, h, w, cout, kh, kw, ho, wo


def _pad4(x: np.ndarray, pad) -> np.ndarray:
    if pad[0] == 0 and pad[1] == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride, dilation, ho: int, wo: int):
    """(N, C, Hp, Wp) -> (N, C*kH*kW, Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    if kh == 1 and kw == 1:  # pointwise: a strided view, no gather
        return xp[:, :, ::stride[0], ::stride[1]].reshape(n, c, ho * wo)
    ih = dilation[0] * np.arange(kh)[:, None, None, None] + stride[0] * np.arange(ho)[None, None, :, None]
    iw = dilation[1] * np.arange(kw)[None, :, None, None] + stride[1] * np.arange(wo)[None, None, None, :]
    patches = xp[:, :, ih, iw]  # (N, C, kH, kW, Ho, Wo)
    return patches.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride, pad, dilation, ho: int, wo: int):
    """Scatter-add patch gradients back to (N, C, H, W)."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad[0], w + 2 * pad[1]
    dxp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    d_patches = cols.reshape(n, c, kh, kw, ho, wo)
    for a in range(kh):
        rs = slice(a * dilation[0], a * dilation[0] + stride[0] * (ho - 1) + 1, stride[0])
        for b in range(kw):
            cs = slice(b * dilation[1], b * dilation[1] + stride[1] * (wo - 1) + 1, stride[1])
            dxp[:, :, rs, cs] += d_patches[:, :, a, b]
    return dxp[:, :, pad[0]:pad[0] + h, pad[1]:pad[1] + w]


def conv2d_raw(x: np.ndarray, weight: np.ndarray, stride=(1, 1), padding=(0, 0),
               dilation=(1, 1)) -> np.ndarray:
    """Plain-array convolution, no tape. Mask bookkeeping rides on this."""
    stride, pad, dilation = _pair(stride), _pair(padding), _pair(dilation)
    n, c, h, w, cout, kh, kw, ho, wo = _conv_geometry(x.shape, weight.shape, stride, pad, dilation)
    cols = _im2col(_pad4(x, pad), kh, kw, stride, dilation, ho, wo)
    out = np.matmul(weight.reshape(cout, -1), cols)
    return out.reshape(n, cout, ho, wo)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    stride, pad, dilation = p.stride, p.padding, p.dilation
    weight, bias = p.weight, p.bias
    n, c, h, w, cout, kh, kw, ho, wo = _conv_geometry(
        x.shape, weight.shape, stride, pad, dilation)

    cols = _im2col(_pad4(x.data, pad), kh, kw, stride, dilation, ho, wo)
    w_mat = weight.data.reshape(cout, -1)
    out = np.matmul(w_mat, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data

    x_shape, w_shape = x.shape, weight.shape
    inputs = [x, weight] if bias is None else [x, weight, bias]

    def bwd(g):
        g_mat = g.reshape(n, cout, ho * wo)
        dx = dw = db = None
        if x.requires_grad:
            d_cols = np.matmul(w_mat.T, g_mat)
            dx = _col2im(d_cols, x_shape, kh, kw, stride, pad, dilation, ho, wo)
        if weight.requires_grad:
            dw = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        return (dx, dw) if bias is None else (dx, dw, db)

    return apply_op("conv2d", inputs, out, bwd)


def _pool_geometry(x_shape, k, stride, pad):
    n, c, h, w = x_shape
    if pad >= k:
        raise ShapeError(f"pool padding {pad} must be smaller than kernel {k}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"pool kernel {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = conv_out_extent(h, k, stride, pad, 1)
    wo = conv_out_extent(w, k, stride, pad, 1)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool output {ho}x{wo} is empty")
    return n, c, h, w, ho, wo


def pool2d(x: Tensor, kind: str, k: int = 3, stride: int = 1, pad: int = 0) -> Tensor:
    if kind not in ("max", "avg"):
        raise ShapeError(f"pool kind must be max or avg, got {kind!r}")
    k, stride, pad = int(k), int(stride), int(pad)
    n, c, h, w, ho, wo = _pool_geometry(x.shape, k, stride, pad)
    sp, dil = (stride, stride), (1, 1)

    # In-bounds indicator, pooled alongside the data: denominator for avg,
    # and a guard keeping padding out of max.
    ones = _pad4(np.ones((1, 1, h, w), dtype=x.dtype), (pad, pad))
    valid = _im2col(ones, k, k, sp, dil, ho, wo).reshape(1, 1, k * k, ho, wo)

    patches = _im2col(_pad4(x.data, (pad, pad)), k, k, sp, dil,
                      ho, wo).reshape(n, c, k * k, ho, wo)
    x_shape = x.shape

    if kind == "avg":
        counts = valid.sum(axis=2)  # (1, 1, Ho, Wo), >= 1 since pad < k
        out = patches.sum(axis=2) / counts

        def bwd(g):
            share = g / counts  # (N, C, Ho, Wo)
            d_patches = share[:, :, None] * valid
            return (_col2im(d_patches.reshape(n, c * k * k, ho * wo), x_shape,
                            k, k, sp, (pad, pad), dil, ho, wo),)
    else:
        neg = np.finfo(x.dtype).min
        guarded = np.where(valid > 0, patches, neg)
        best = np.argmax(guarded, axis=2)  # first maximal index in window scan order
        out = np.take_along_axis(guarded, best[:, :, None], axis=2)[:, :, 0]

        def bwd(g):
            d_patches = np.zeros((n, c, k * k, ho, wo), dtype=g.dtype)
            np.put_along_axis(d_patches, best[:, :, None], g[:, :, None], axis=2)
            return (_col2im(d_patches.reshape(n, c * k * k, ho * wo), x_shape,
                            k, k, sp, (pad, pad), dil, ho, wo),)

    return apply_op(f"pool_{kind}", [x], out, bwd)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    f = int(factor)
    if f < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    n, c, h, w = x.shape

    def bwd(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return apply_op("upsample", [x], out, bwd)


class BatchNormState:
    """Per-channel affine normalization with running statistics.

    gamma and beta are trainable leaves; running_mean / running_var are
    state buffers updated in train mode and read in eval mode:
        running = (1 - momentum) * running + momentum * batch_stat
    with the unbiased batch variance going into running_var.
    """

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
                 dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ShapeError(f"momentum must be in (0,1), got {momentum}")
        if epsilon <= 0:
            raise ShapeError(f"epsilon must be positive, got {epsilon}")
        c = int(channels)
        self.gamma = Tensor(np.ones((1, c, 1, 1)), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros((1, c, 1, 1)), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros((1, c, 1, 1), dtype=dtype)
        self.running_var = np.ones((1, c, 1, 1), dtype=dtype)
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]


def batch_norm(x: Tensor, s: BatchNormState, mode: str = "train") -> Tensor:
    if mode not in ("train", "eval"):
        raise ShapeError(f"batch_norm mode must be train or eval, got {mode!r}")
    if x.shape[1] != s.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, state has {s.channels}")
    gamma, beta, eps = s.gamma, s.beta, s.epsilon
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if mode == "train":
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)  # biased, used for normalization
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = s.momentum
        s.running_mean = ((1 - mom) * s.running_mean + mom * mean).astype(s.running_mean.dtype)
        s.running_var = ((1 - mom) * s.running_var + mom * unbiased).astype(s.running_var.dtype)
    else:
        mean = s.running_mean.astype(x.dtype)
        var = s.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes, keepdims=True) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes, keepdims=True) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if mode == "train":
                # batch statistics depend on x: full normalization backward
                dx = (inv_std / m) * (m * dxhat
                                      - dxhat.sum(axis=axes, keepdims=True)
                                      - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return apply_op(f"batch_norm_{mode}", [x, gamma, beta], out, bwd)


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    """relu or leaky_relu. Slope at exactly 0 is alpha (0 for relu), so the
    kink policy is one rule: gradient follows the non-positive branch."""
    if kind == "relu":
        alpha = 0.0
    elif kind != "leaky_relu":
        raise ShapeError(f"activation kind must be relu or leaky_relu, got {kind!r}")
    alpha = float(alpha)
    if not 0.0 <= alpha < 1.0:
        raise ShapeError(f"alpha must be in [0,1), got {alpha}")
    pos = x.data > 0
    out = np.where(pos, x.data, alpha * x.data)
    slope = np.where(pos, x.dtype.type(1.0), x.dtype.type(alpha))

    return apply_op(kind, [x], out, lambda g: (g * slope,))


def concat_channels(inputs: list[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError(f"concat spatial mismatch: {inputs[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    sizes = [t.shape[1] for t in inputs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return apply_op("concat", list(inputs), out, bwd)
