"""Multi-branch (inception-style) layers built from partial convolutions.

A layer runs several branches over the same masked input and
concatenates their outputs channel-wise:

    1x1 conv | 1x1 bottleneck -> kxk | nx1 -> 1xn decomposition |
    3x3 pool -> 1x1 conv

Branch stages are linear; batch norm and the activation apply once,
after concatenation. The layer stride sits on each branch's final
convolution (the pool branch strides its pool) so every branch produces
the same spatial extent for any stride.

Mask handling: each branch propagates the mask through its own stages,
so branches with different receptive windows can disagree near hole
boundaries (a 5x5 window can see a valid pixel that a 3x3 window
cannot). The layer emits the union of the branch masks: a position
counts as valid downstream when at least one branch produced real
signal there. Branch masks are totally ordered by window size, so the
union equals the widest branch's mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConstructionError, ContractError, ParseError
from .ops import Conv2dParams, pool2d
from .pconv import MaskedActivation, partial_conv2d, update_mask
from .rng import derive_seed
from .tensor import Tensor, constant, tensor_new
from .ops import activation as apply_activation
from .ops import BatchNormState, batch_norm

_KINDS = ("conv", "pool_then_conv", "decomposed_conv")
_POOL_K = 3


@dataclass
class BranchSpec:
    """One parallel branch.

    kind "conv": optional 1x1 bottleneck, then a kernel x kernel conv.
    kind "decomposed_conv": kernel x 1 then 1 x kernel strips;
        bottleneck_channels is the width between the strips (defaults to
        out_channels).
    kind "pool_then_conv": 3x3 max pool, then a 1x1 conv; kernel is
        ignored.
    """

    kind: str
    out_channels: int
    kernel: int = 1
    bottleneck_channels: int | None = None

    def validate(self):
        if self.kind not in _KINDS:
            raise ConstructionError(f"branch kind {self.kind!r} not in {_KINDS}")
        if self.out_channels < 1:
            raise ConstructionError(f"out_channels must be positive, got {self.out_channels}")
        if self.bottleneck_channels is not None and self.bottleneck_channels < 1:
            raise ConstructionError(
                f"bottleneck_channels must be positive, got {self.bottleneck_channels}")
        if self.kind == "conv":
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ConstructionError(f"conv kernel must be odd, got {self.kernel}")
        elif self.kind == "decomposed_conv":
            if self.kernel < 3 or self.kernel % 2 == 0:
                raise ConstructionError(
                    f"decomposed kernel must be odd and >= 3, got {self.kernel}")
        elif self.kind == "pool_then_conv" and self.bottleneck_channels is not None:
            raise ConstructionError("pool branch takes no bottleneck")

    @property
    def window(self) -> int:
        """Receptive window edge relative to the branch input."""
        if self.kind == "pool_then_conv":
            return _POOL_K
        return self.kernel


@dataclass
class InceptionSpec:
    branches: list[BranchSpec] = field(default_factory=list)
    layer_stride: int = 1
    activation: str = "relu"
    alpha: float = 0.2
    batch_norm: bool = True

    def validate(self):
        if len(self.branches) < 2:
            raise ConstructionError(
                f"an inception layer needs at least 2 branches, got {len(self.branches)}")
        if self.layer_stride < 1:
            raise ConstructionError(f"layer_stride must be positive, got {self.layer_stride}")
        if self.activation not in ("relu", "leaky_relu"):
            raise ConstructionError(f"activation {self.activation!r} unknown")
        if not 0.0 <= self.alpha < 1.0:
            raise ConstructionError(f"alpha must be in [0,1), got {self.alpha}")
        for b in self.branches:
            b.validate()

    @property
    def out_channels(self) -> int:
        return sum(b.out_channels for b in self.branches)


def default_inception_spec(in_channels: int, out_channels: int, layer_stride: int = 1,
                           activation: str = "relu", alpha: float = 0.2,
                           batch_norm: bool = True) -> InceptionSpec:
    """Four classic branches: 1x1 a quarter, bottlenecked 3x3 half,
    bottlenecked 5x5 an eighth, pooled 1x1 an eighth (remainder into the
    3x3). Needs out_channels >= 4."""
    c1 = max(1, out_channels // 4)
    c5 = max(1, out_channels // 8)
    cp = max(1, out_channels // 8)
    c3 = out_channels - c1 - c5 - cp
    if c3 < 1:
        raise ConstructionError(
            f"default inception split needs out_channels >= 4, got {out_channels}")
    return InceptionSpec(
        branches=[
            BranchSpec("conv", c1, kernel=1),
            BranchSpec("conv", c3, kernel=3, bottleneck_channels=max(1, in_channels // 4)),
            BranchSpec("conv", c5, kernel=5, bottleneck_channels=max(1, in_channels // 8)),
            BranchSpec("pool_then_conv", cp),
        ],
        layer_stride=layer_stride, activation=activation, alpha=alpha,
        batch_norm=batch_norm)


def _branch_stages(b: BranchSpec, cin: int) -> list[tuple[str, int, tuple[int, int], int]]:
    """(label, in_ch, (kh, kw), out_ch) per conv stage, in order."""
    if b.kind == "conv":
        if b.bottleneck_channels is None:
            return [("main", cin, (b.kernel, b.kernel), b.out_channels)]
        return [("reduce", cin, (1, 1), b.bottleneck_channels),
                ("main", b.bottleneck_channels, (b.kernel, b.kernel), b.out_channels)]
    if b.kind == "decomposed_conv":
        mid = b.bottleneck_channels if b.bottleneck_channels is not None else b.out_channels
        return [("col", cin, (b.kernel, 1), mid),
                ("row", mid, (1, b.kernel), b.out_channels)]
    return [("project", cin, (1, 1), b.out_channels)]  # pool_then_conv


def param_count(spec: InceptionSpec, in_channels: int) -> int:
    """Exact weight-element count across all branches (biases excluded;
    see param_breakdown for those)."""
    if in_channels < 1:
        raise ConstructionError(f"in_channels must be positive, got {in_channels}")
    return param_breakdown(spec, in_channels)["weights"]


def param_breakdown(spec: InceptionSpec, in_channels: int) -> dict:
    """Stage-by-stage accounting: weight and bias counts per conv."""
    branches = []
    total_w = total_b = 0
    for b in spec.branches:
        stages = []
        bw = bb = 0
        for label, cin, (kh, kw), cout in _branch_stages(b, in_channels):
            w = cin * kh * kw * cout
            stages.append({"stage": label, "kernel": (kh, kw),
                           "weights": w, "biases": cout})
            bw += w
            bb += cout
        branches.append({"kind": b.kind, "stages": stages, "weights": bw, "biases": bb})
        total_w += bw
        total_b += bb
    return {"branches": branches, "weights": total_w, "biases": total_b}


class _Stage:
    def __init__(self, params: Conv2dParams):
        self.params = params


class _Branch:
    def __init__(self, spec: BranchSpec, stages: list[_Stage], layer_stride: int):
        self.spec = spec
        self.stages = stages
        self.layer_stride = layer_stride

    def forward(self, x: MaskedActivation, norm_mode: str) -> MaskedActivation:
        cur = x
        if self.spec.kind == "pool_then_conv":
            s = self.layer_stride
            feats = pool2d(cur.features, "max", k=_POOL_K, stride=s, pad=_POOL_K // 2)
            m = update_mask(cur.mask.data, _POOL_K, _POOL_K, (s, s),
                            (_POOL_K // 2, _POOL_K // 2))
            cur = MaskedActivation(feats, constant(m))
        for st in self.stages:
            cur = partial_conv2d(cur, st.params, norm_mode)
        return cur


class InceptionLayer:
    """Built, callable multi-branch layer. See module docstring for the
    mask-union convention."""

    def __init__(self, spec: InceptionSpec, in_channels: int, branches: list[_Branch],
                 bn: BatchNormState | None, norm_mode: str):
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = spec.out_channels
        self.branches = branches
        self.bn = bn
        self.norm_mode = norm_mode

    def branch_forward(self, x: MaskedActivation) -> list[MaskedActivation]:
        return [br.forward(x, self.norm_mode) for br in self.branches]

    def branch_outputs(self, x: MaskedActivation) -> list[Tensor]:
        """Pre-concatenation activations, one per branch (Figure-style
        feature visualization and tests)."""
        return [ma.features for ma in self.branch_forward(x)]

    def forward(self, x: MaskedActivation, mode: str = "train") -> MaskedActivation:
        outs = self.branch_forward(x)
        shapes = {tuple(ma.mask.shape) for ma in outs}
        if len(shapes) != 1:
            raise ConstructionError(f"branch mask shapes diverged: {sorted(shapes)}")
        union = outs[0].mask.data
        for ma in outs[1:]:
            union = np.maximum(union, ma.mask.data)
        for ma in outs:  # every branch mask is contained in the union
            if np.any(ma.mask.data > union):
                raise ContractError("branch mask escapes the union")
        from .ops import concat_channels
        feats = concat_channels([ma.features for ma in outs])
        if self.bn is not None:
            feats = batch_norm(feats, self.bn, mode)
        feats = apply_activation(feats, self.spec.activation, self.spec.alpha)
        return MaskedActivation(feats, constant(union))

    def __call__(self, x: MaskedActivation, mode: str = "train") -> MaskedActivation:
        return self.forward(x, mode)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, br in enumerate(self.branches):
            for j, st in enumerate(br.stages):
                out.append((f"b{i}.s{j}.weight", st.params.weight))
                if st.params.bias is not None:
                    out.append((f"b{i}.s{j}.bias", st.params.bias))
        if self.bn is not None:
            out.append(("bn.gamma", self.bn.gamma))
            out.append(("bn.beta", self.bn.beta))
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        if self.bn is None:
            return []
        return [("bn.running_mean", self.bn.running_mean),
                ("bn.running_var", self.bn.running_var)]


def build_inception(spec: InceptionSpec, in_channels: int, seed: int,
                    dtype=np.float32, norm_mode: str = "scaled") -> InceptionLayer:
    spec.validate()
    if in_channels < 1:
        raise ConstructionError(f"in_channels must be positive, got {in_channels}")
    s = spec.layer_stride
    # A bias feeding batch norm is a no-op direction (BN recenters it
    # away), which also makes its finite-difference gradient pure noise;
    # biases are only allocated when no BN follows.
    with_bias = not spec.batch_norm
    branches = []
    for i, b in enumerate(spec.branches):
        stages = []
        conv_stages = _branch_stages(b, in_channels)
        for j, (label, cin, (kh, kw), cout) in enumerate(conv_stages):
            final = j == len(conv_stages) - 1
            # stride rides on the final conv; the pool branch already
            # strided its pool, so its conv stays at 1
            stride = s if (final and b.kind != "pool_then_conv") else 1
            std = float(np.sqrt(2.0 / (cin * kh * kw)))
            w = tensor_new((cout, cin, kh, kw), ("gaussian", 0.0, std),
                           seed=derive_seed(seed, f"b{i}.s{j}.weight"),
                           requires_grad=True, dtype=dtype)
            bias = None
            if with_bias:
                bias = tensor_new((1, cout, 1, 1), ("constant", 0.0),
                                  requires_grad=True, dtype=dtype)
            stages.append(_Stage(Conv2dParams(weight=w, bias=bias, stride=stride,
                                              padding=(kh // 2, kw // 2))))
        branches.append(_Branch(b, stages, s))
    bn = BatchNormState(spec.out_channels, dtype=dtype) if spec.batch_norm else None
    return InceptionLayer(spec, in_channels, branches, bn, norm_mode)


# Plain-text round trip: one compact string per layer, e.g.
#   "1x1:o32|3x3:b16:o64|5x5d:b8:o16|pool:o16"
def branches_to_text(branches: list[BranchSpec]) -> str:
    toks = []
    for b in branches:
        if b.kind == "pool_then_conv":
            head = "pool"
        else:
            head = f"{b.kernel}x{b.kernel}" + ("d" if b.kind == "decomposed_conv" else "")
        parts = [head]
        if b.bottleneck_channels is not None:
            parts.append(f"b{b.bottleneck_channels}")
        parts.append(f"o{b.out_channels}")
        toks.append(":".join(parts))
    return "|".join(toks)


def branches_from_text(text: str) -> list[BranchSpec]:
    out = []
    for tok in text.split("|"):
        fields = [f.strip() for f in tok.strip().split(":") if f.strip()]
        if not fields:
            raise ParseError(f"empty branch token in {text!r}")
        head, rest = fields[0], fields[1:]
        if head == "pool":
            kind, kernel = "pool_then_conv", 1
        else:
            decomposed = head.endswith("d")
            core = head[:-1] if decomposed else head
            dims = core.split("x")
            if len(dims) != 2 or dims[0] != dims[1] or not dims[0].isdigit():
                raise ParseError(f"bad kernel token {head!r}")
            kind = "decomposed_conv" if decomposed else "conv"
            kernel = int(dims[0])
        bott = None
        cout = None
        for f in rest:
            if f.startswith("b") and f[1:].isdigit():
                bott = int(f[1:])
            elif f.startswith("o") and f[1:].isdigit():
                cout = int(f[1:])
            else:
                raise ParseError(f"bad branch field {f!r} in {tok!r}")
        if cout is None:
            raise ParseError(f"branch {tok!r} missing out channels (o<N>)")
        b = BranchSpec(kind, cout, kernel=kernel, bottleneck_channels=bott)
        try:
            b.validate()
        except ConstructionError as e:
            raise ParseError(f"branch {tok!r}: {e}") from e
        out.append(b)
    return out
