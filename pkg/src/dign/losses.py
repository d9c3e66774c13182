"""The guided objective: masked L1, perceptual and style terms.

Reconstruction is a per-element L1 split into hole and valid parts, so
the two regions carry independent weights. Perceptual and style losses
compare activations of a frozen feature extractor; with no pretrained
backbone in a from-scratch build, the default extractor is a seed-fixed
random 5-layer conv stack with taps after layers 2, 3 and 4 (random
frozen features as a perceptual proxy). Imported weights in the
checkpoint tensor format are accepted instead.

Normalization counts the batch dimension: masked L1 divides by the
number of summed elements, perceptual terms by N*C_j*H_j*W_j, and style
terms are averaged over the batch, so magnitudes are comparable across
batch sizes and the single-tap identity extractor reproduces plain
normalized L1 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import canonical_text, config_digest
from .errors import ContractError, IncompatibilityError, ShapeError
from .ops import Conv2dParams, conv2d, activation
from .rng import derive_seed
from .serialize import read_checkpoint_file, write_checkpoint_file
from .tensor import (Tensor, absolute, add, apply_op, constant, mul, scale,
                     sub, sum_all, tensor_new)


@dataclass
class LossWeights:
    w_hole: float = 6.0
    w_valid: float = 1.0
    w_perc: float = 0.05
    w_style: float = 120.0

    def validate(self):
        ws = (self.w_hole, self.w_valid, self.w_perc, self.w_style)
        if any(w < 0 for w in ws):
            raise ContractError(f"loss weights must be non-negative, got {ws}")
        if not any(w > 0 for w in ws):
            raise ContractError("at least one loss weight must be positive")


def _as_mask_array(mask, like: Tensor) -> np.ndarray:
    """Accept a MaskImage, array, or tensor; return (N,1,H,W) float 0/1."""
    data = getattr(mask, "bits", None)
    if data is None:
        data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if data.ndim == 2:
        data = data[None, None]
    data = data.astype(like.dtype)
    n, _, h, w = like.shape
    if data.shape[2:] != (h, w) or data.shape[1] != 1:
        raise ShapeError(f"mask shape {data.shape} does not fit features {like.shape}")
    if data.shape[0] == 1 and n > 1:
        data = np.broadcast_to(data, (n, 1, h, w)).copy()
    elif data.shape[0] != n:
        raise ShapeError(f"mask batch {data.shape[0]} vs features batch {n}")
    if not np.all((data == 0) | (data == 1)):
        raise ContractError("loss mask must be exactly 0/1")
    return data


def masked_l1(x: Tensor, output: Tensor, mask) -> tuple[Tensor, Tensor]:
    """(hole_l1, valid_l1): split normalized L1 over the mask regions.

    Each term divides by the number of elements it sums (channels
    included); an empty region contributes exact 0.
    """
    if x.shape != output.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {output.shape}")
    m = _as_mask_array(mask, x)
    c = x.shape[1]
    hole_count = float((1 - m).sum() * c)
    valid_count = float(m.sum() * c)
    diff = sub(x, output)

    def region(weights: np.ndarray, count: float) -> Tensor:
        if count == 0:
            return constant(np.zeros((1, 1, 1, 1)), dtype=x.dtype)
        total = sum_all(absolute(mul(diff, constant(weights, dtype=x.dtype))))
        return scale(total, 1.0 / count)

    return region(1 - m, hole_count), region(m, valid_count)


class FeatureExtractor:
    """Frozen conv stack exposing tap activations phi_j.

    layers is a list of Conv2dParams applied with ReLU between; taps are
    1-indexed layer positions whose post-activation outputs are
    returned. The identity variant has no layers and taps the input
    directly.
    """

    CHANNELS = (16, 32, 64, 64, 64)
    STRIDES = (1, 2, 2, 2, 1)
    KERNEL = 3
    TAPS = (2, 3, 4)

    def __init__(self, layers: list[Conv2dParams], taps: tuple[int, ...], meta: dict):
        self.layers = layers
        self.taps = tuple(taps)
        self.meta = dict(meta)
        if layers and (min(self.taps) < 1 or max(self.taps) > len(layers)):
            raise ContractError(f"taps {taps} out of range for {len(layers)} layers")

    @classmethod
    def default(cls, seed: int = 23, dtype=np.float32) -> "FeatureExtractor":
        layers = []
        cin = 3
        for i, (cout, s) in enumerate(zip(cls.CHANNELS, cls.STRIDES)):
            k = cls.KERNEL
            std = float(np.sqrt(2.0 / (cin * k * k)))
            w = tensor_new((cout, cin, k, k), ("gaussian", 0.0, std),
                           seed=derive_seed(seed, f"fx.l{i}.weight"), dtype=dtype)
            layers.append(Conv2dParams(weight=w, stride=s, padding=k // 2))
            cin = cout
        meta = {"fx.kind": "conv5", "fx.seed": str(seed),
                "fx.taps": ",".join(str(t) for t in cls.TAPS)}
        return cls(layers, cls.TAPS, meta)

    @classmethod
    def identity(cls) -> "FeatureExtractor":
        return cls([], (0,), {"fx.kind": "identity", "fx.taps": "0"})

    def features(self, x: Tensor) -> list[Tensor]:
        if not self.layers:
            return [x]
        out = []
        cur = x
        for j, p in enumerate(self.layers, start=1):
            cur = activation(conv2d(cur, p), "relu")
            if j in self.taps:
                out.append(cur)
            if j >= max(self.taps):
                break
        return out

    def digest(self) -> int:
        return config_digest(self.meta)

    def save(self, path: str) -> None:
        entries = {f"l{i}.weight": p.weight.data for i, p in enumerate(self.layers)}
        write_checkpoint_file(path, self.digest(), 0, canonical_text(self.meta), entries)

    @classmethod
    def load(cls, path: str, dtype=np.float32) -> "FeatureExtractor":
        from .config import parse_config_text
        digest, _, text, entries = read_checkpoint_file(path)
        meta = parse_config_text(text, source=path)
        if config_digest(meta) != digest:
            raise IncompatibilityError(f"{path}: config digest mismatch")
        if meta.get("fx.kind") == "identity":
            return cls.identity()
        taps = tuple(int(t) for t in meta["fx.taps"].split(","))
        layers = []
        for i in range(len(entries)):
            w = entries[f"l{i}.weight"].astype(dtype)
            layers.append(Conv2dParams(weight=Tensor(w, dtype=dtype),
                                       stride=cls.STRIDES[i], padding=cls.KERNEL // 2))
        return cls(layers, taps, meta)


def perceptual_loss(yhat: Tensor, y: Tensor, fx: FeatureExtractor) -> Tensor:
    """Sum over taps of per-element L1 between the tap activations."""
    if yhat.shape != y.shape:
        raise ShapeError(f"shape mismatch {yhat.shape} vs {y.shape}")
    total = None
    for fh, ft in zip(fx.features(yhat), fx.features(y)):
        n, c, h, w = fh.shape
        term = scale(sum_all(absolute(sub(fh, ft))), 1.0 / (n * c * h * w))
        total = term if total is None else add(total, term)
    return total


def gram(feat: Tensor) -> Tensor:
    """Per-item Gram matrix, shape (N, 1, C, C): G = F F^T / (C*H*W)
    with F the (C, H*W) unfolding. Symmetric PSD by construction."""
    n, c, h, w = feat.shape
    f = feat.data.reshape(n, c, h * w)
    norm = 1.0 / (c * h * w)
    out = np.matmul(f, f.transpose(0, 2, 1))[:, None] * norm

    def bwd(g):
        gsq = g[:, 0]
        return ((np.matmul(gsq + gsq.transpose(0, 2, 1), f) * norm).reshape(n, c, h, w),)

    return apply_op("gram", [feat], out, bwd)


def style_loss(yhat: Tensor, y: Tensor, fx: FeatureExtractor) -> Tensor:
    """Sum over taps of the L1 gap between Gram matrices, batch-averaged."""
    if yhat.shape != y.shape:
        raise ShapeError(f"shape mismatch {yhat.shape} vs {y.shape}")
    n = yhat.shape[0]
    total = None
    for fh, ft in zip(fx.features(yhat), fx.features(y)):
        term = scale(sum_all(absolute(sub(gram(fh), gram(ft)))), 1.0 / n)
        total = term if total is None else add(total, term)
    return total


def total_loss(x: Tensor, output: Tensor, composite: Tensor, mask,
               fx: FeatureExtractor, w: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective. Reconstruction compares x against the raw
    network output; perceptual and style terms run on the composite.

    Returns the scalar graph tensor and a float breakdown; terms with
    weight 0 are skipped and reported as 0.
    """
    w.validate()
    hole, valid = masked_l1(x, output, mask)
    breakdown = {"hole_l1": hole.item(), "valid_l1": valid.item()}
    total = add(scale(hole, w.w_hole), scale(valid, w.w_valid))
    if w.w_perc > 0:
        perc = perceptual_loss(composite, x, fx)
        breakdown["perc"] = perc.item()
        total = add(total, scale(perc, w.w_perc))
    else:
        breakdown["perc"] = 0.0
    if w.w_style > 0:
        sty = style_loss(composite, x, fx)
        breakdown["style"] = sty.item()
        total = add(total, scale(sty, w.w_style))
    else:
        breakdown["style"] = 0.0
    breakdown["total"] = total.item()
    return total, breakdown
