"""Partial convolution: convolution renormalized over valid pixels.

At each output position, with X the input window, M the binary mask
window, W the kernel and b the bias:

    out = (W . (X o M)) * r + b     if sum(M) > 0
    out = 0                          otherwise (bias suppressed)

r depends on norm_mode:
    "paper"   r = 1 / sum(M)
    "scaled"  r = sum(1) / sum(M), sum(1) counting the window elements
              that fall inside the image (zero padding is not a valid
              pixel, mirroring the avg-pool denominator rule)

With the in-bounds convention, an all-valid mask gives r = 1 at every
position including borders, so "scaled" degenerates to standard conv2d
exactly. The propagated mask is 1 wherever the window saw any valid
pixel.

r, the validity indicator, and the updated mask are pure functions of
the input mask and geometry; they enter the tape as constants, so
gradients flow only through valid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .ops import Conv2dParams, conv2d, conv2d_raw
from .tensor import Tensor, add, constant, mul

_NORM_MODES = ("paper", "scaled")


@dataclass
class MaskedActivation:
    """Features plus the single-channel validity mask riding along."""

    features: Tensor
    mask: Tensor

    def __post_init__(self):
        f, m = self.features, self.mask
        if m.shape[1] != 1:
            raise ContractError(f"mask must be single-channel, got {m.shape}")
        if (m.shape[0], m.shape[2], m.shape[3]) != (f.shape[0], f.shape[2], f.shape[3]):
            raise ShapeError(f"mask {m.shape} does not match features {f.shape}")
        check_binary(m.data)

    @property
    def shape(self):
        return self.features.shape


def check_binary(mask: np.ndarray) -> None:
    if not np.all((mask == 0) | (mask == 1)):
        bad = mask[(mask != 0) & (mask != 1)]
        raise ContractError(f"mask must be exactly 0/1; found value {bad.flat[0]!r}")


# The renormalization factor and updated mask are pure functions of the
# input mask and conv geometry. grad_check and training revisit the same
# masks thousands of times, so the arithmetic is memoized on the mask
# bytes; cached arrays are handed out as constants and never mutated.
_FACTOR_CACHE: dict = {}
_FACTOR_CACHE_LIMIT = 512


def _mask_factors(mask_data: np.ndarray, kh: int, kw: int, stride, padding,
                  dilation, h: int, w: int, norm_mode: str, dtype):
    key = (mask_data.tobytes(), mask_data.shape, kh, kw, stride, padding,
           dilation, norm_mode, np.dtype(dtype).str)
    hit = _FACTOR_CACHE.get(key)
    if hit is not None:
        return hit
    ones_kernel = np.ones((1, 1, kh, kw), dtype=dtype)
    msum = conv2d_raw(mask_data.astype(dtype), ones_kernel,
                      stride, padding, dilation)              # (N,1,Ho,Wo)
    valid = msum > 0
    if norm_mode == "paper":
        numer = np.ones_like(msum)
    else:
        in_bounds = conv2d_raw(np.ones((1, 1, h, w), dtype=dtype), ones_kernel,
                               stride, padding, dilation)     # (1,1,Ho,Wo)
        numer = np.broadcast_to(in_bounds, msum.shape)
    # r where the window saw a valid pixel, 0 where it saw none
    factor = np.where(valid, numer / np.where(valid, msum, 1), 0).astype(dtype)
    valid_ind = valid.astype(dtype)
    if len(_FACTOR_CACHE) >= _FACTOR_CACHE_LIMIT:
        _FACTOR_CACHE.clear()
    _FACTOR_CACHE[key] = (factor, valid_ind)
    return factor, valid_ind


def partial_conv2d(x: MaskedActivation, p: Conv2dParams,
                   norm_mode: str = "scaled") -> MaskedActivation:
    if norm_mode not in _NORM_MODES:
        raise ContractError(f"norm_mode must be one of {_NORM_MODES}, got {norm_mode!r}")
    feats, mask = x.features, x.mask
    n, _, h, w = feats.shape
    kh, kw = p.weight.shape[2], p.weight.shape[3]
    dtype = feats.data.dtype

    factor, valid_ind = _mask_factors(mask.data, kh, kw, p.stride, p.padding,
                                      p.dilation, h, w, norm_mode, dtype)

    masked_in = mul(feats, constant(mask.data.astype(dtype)))
    raw = conv2d(masked_in, Conv2dParams(weight=p.weight, bias=None, stride=p.stride,
                                         padding=p.padding, dilation=p.dilation))
    out = mul(raw, constant(factor))
    if p.bias is not None:
        out = add(out, mul(p.bias, constant(valid_ind)))

    new_mask = constant(valid_ind)
    return MaskedActivation(features=out, mask=new_mask)


def update_mask(mask: np.ndarray, kh: int, kw: int, stride=(1, 1), padding=(0, 0),
                dilation=(1, 1)) -> np.ndarray:
    """Mask propagation alone: 1 where the window holds any valid pixel."""
    check_binary(mask)
    ones_kernel = np.ones((1, 1, kh, kw), dtype=mask.dtype)
    msum = conv2d_raw(mask, ones_kernel, stride, padding, dilation)
    return (msum > 0).astype(mask.dtype)


def mask_coverage(mask_sequence) -> list[float]:
    """Valid-pixel fraction per layer. Non-decreasing through stride-1
    partial convolutions with kernel >= 3 and pad >= 1."""
    fractions = []
    for m in mask_sequence:
        data = m.data if isinstance(m, Tensor) else np.asarray(m)
        check_binary(data)
        fractions.append(float(data.mean()))
    return fractions
