"""The inpainting network: an 8+8 partial-convolution U-net.

Encoder layers use ReLU, decoder layers LeakyReLU(0.2), all but the
final layer carry batch norm. Layers 2-7 of each half are inception
layers; layer 1 of the encoder is a plain 7x7 partial-conv stem, layer
8 of each half is a plain 3x3 partial conv, and the final decoder layer
produces 3 channels with no BN and no activation ahead of clamping.

The spatial schedule is deliberately non-monotone: encoder layer 4 runs
at stride 1, so layers 4 and 5 both operate on the same extent (32x32
for a 256 input). A layer's "spatial" is the extent it reads. Smaller
resolutions drop trailing downsamplings so the bottleneck never shrinks
below 4x4.

Skip connections concatenate encoder features (and their masks, by
union) into the mirror decoder layer: decoder i takes its skip from
encoder 8-i, with decoder 8 reading the raw network input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .errors import (ConstructionError, IncompatibilityError, ParseError,
                     ShapeError)
from .inception import (InceptionLayer, InceptionSpec, branches_from_text,
                        branches_to_text, build_inception,
                        default_inception_spec)
from .maskgen import MaskImage
from .ops import BatchNormState, Conv2dParams, activation, batch_norm, concat_channels, upsample_nearest
from .pconv import MaskedActivation, partial_conv2d
from .rng import derive_seed
from .serialize import read_checkpoint_file, write_checkpoint_file
from .tensor import Tensor, clamp, constant, mul, add, tensor_new

BASE_ENC_CHANNELS = (32, 64, 128, 128, 256, 256, 256, 256)
BASE_DEC_CHANNELS = (256, 256, 256, 128, 128, 64, 32, 3)
LEAKY_ALPHA = 0.2


@dataclass
class EncoderEntry:
    kind: str                      # "pconv" | "inception"
    stride: int
    out_channels: int
    expected_spatial: int          # extent this layer reads
    kernel: int = 3                # pconv only
    spec: InceptionSpec | None = None  # explicit branch override


@dataclass
class DecoderEntry:
    kind: str
    upsample: bool
    skip_source: int               # encoder index 1..8, or 0 = raw input
    out_channels: int
    expected_spatial: int
    kernel: int = 3
    spec: InceptionSpec | None = None


@dataclass
class GeneratorConfig:
    input_resolution: int = 256
    channel_scale: float = 1.0
    norm_mode: str = "scaled"
    encoder: list[EncoderEntry] = field(default_factory=list)
    decoder: list[DecoderEntry] = field(default_factory=list)

    def __post_init__(self):
        if not self.encoder and not self.decoder:
            self._fill_default()
        self.validate()

    def _fill_default(self):
        r = self.input_resolution
        if r < 8 or r % 2 != 0:
            raise ConstructionError(
                f"input_resolution must be even and >= 8, got {r}")
        halvings = 0
        size = r
        while size > 4:
            size //= 2
            halvings += 1
        halvings = min(halvings, 6)
        # encoder layer 4 is always stride 1 (the paper's 4th/5th layers
        # share their extent); remaining halvings fill greedily
        strides = []
        used = 0
        for i in range(1, 9):
            if i != 4 and used < halvings:
                strides.append(2)
                used += 1
            else:
                strides.append(1)

        def scaled(c: int, floor: int) -> int:
            return max(floor, int(round(c * self.channel_scale)))

        size = r
        for i, s in enumerate(strides, 1):
            inception = 2 <= i <= 7
            out = scaled(BASE_ENC_CHANNELS[i - 1], 4 if inception else 1)
            self.encoder.append(EncoderEntry(
                kind="inception" if inception else "pconv",
                stride=s, out_channels=out, expected_spatial=size,
                kernel=7 if i == 1 else 3))
            size = (size - 1) // s + 1

        up_flags = [s == 2 for s in reversed(strides)]
        for j, up in enumerate(up_flags, 1):
            if up:
                size *= 2
            inception = 2 <= j <= 7
            if j == 8:
                out = 3
            else:
                out = scaled(BASE_DEC_CHANNELS[j - 1], 4 if inception else 1)
            self.decoder.append(DecoderEntry(
                kind="inception" if inception else "pconv",
                upsample=up, skip_source=8 - j, out_channels=out,
                expected_spatial=size, kernel=3))

    def validate(self):
        if len(self.encoder) != 8 or len(self.decoder) != 8:
            raise ConstructionError(
                f"schedule must have 8+8 entries, got {len(self.encoder)}+{len(self.decoder)}")
        if self.channel_scale <= 0:
            raise ConstructionError(f"channel_scale must be positive, got {self.channel_scale}")
        if self.norm_mode not in ("paper", "scaled"):
            raise ConstructionError(f"norm_mode must be paper or scaled, got {self.norm_mode!r}")
        if self.encoder[3].expected_spatial != self.encoder[4].expected_spatial:
            raise ConstructionError(
                "encoder layers 4 and 5 must share their spatial extent, got "
                f"{self.encoder[3].expected_spatial} vs {self.encoder[4].expected_spatial}")
        if self.decoder[3].expected_spatial != self.decoder[4].expected_spatial:
            raise ConstructionError(
                "decoder layers 4 and 5 must share their spatial extent, got "
                f"{self.decoder[3].expected_spatial} vs {self.decoder[4].expected_spatial}")
        if self.decoder[7].out_channels != 3:
            raise ConstructionError(
                f"final layer must emit 3 channels, got {self.decoder[7].out_channels}")
        # walk the schedule; every skip junction must line up
        size = self.input_resolution
        enc_out_sizes = []
        for i, e in enumerate(self.encoder, 1):
            if e.expected_spatial != size:
                raise ConstructionError(
                    f"encoder layer {i} expects spatial {e.expected_spatial}, trace gives {size}")
            size = (size - 1) // e.stride + 1
            enc_out_sizes.append(size)
        for j, d in enumerate(self.decoder, 1):
            if d.upsample:
                size *= 2
            if d.expected_spatial != size:
                raise ConstructionError(
                    f"decoder layer {j} expects spatial {d.expected_spatial}, trace gives {size}")
            skip_size = (self.input_resolution if d.skip_source == 0
                         else enc_out_sizes[d.skip_source - 1])
            if skip_size != size:
                raise ConstructionError(
                    f"skip junction mismatch at decoder layer {j}: features at {size}, "
                    f"skip source {d.skip_source} at {skip_size}")
        if size != self.input_resolution:
            raise ConstructionError(
                f"decoder ends at {size}, input resolution is {self.input_resolution}")

    def spatial_trace(self) -> dict[str, list[int]]:
        """Extent each layer reads, encoder then decoder."""
        return {"encoder": [e.expected_spatial for e in self.encoder],
                "decoder": [d.expected_spatial for d in self.decoder]}

    def to_dict(self) -> dict[str, str]:
        out = {"gen.resolution": str(self.input_resolution),
               "gen.channel_scale": cfgmod.format_value(float(self.channel_scale)),
               "gen.norm_mode": self.norm_mode}
        for i, e in enumerate(self.encoder, 1):
            p = f"enc.{i}"
            out[f"{p}.kind"] = e.kind
            out[f"{p}.stride"] = str(e.stride)
            out[f"{p}.out"] = str(e.out_channels)
            out[f"{p}.spatial"] = str(e.expected_spatial)
            out[f"{p}.kernel"] = str(e.kernel)
            if e.spec is not None:
                out[f"{p}.branches"] = branches_to_text(e.spec.branches)
        for j, d in enumerate(self.decoder, 1):
            p = f"dec.{j}"
            out[f"{p}.kind"] = d.kind
            out[f"{p}.upsample"] = "true" if d.upsample else "false"
            out[f"{p}.skip"] = str(d.skip_source)
            out[f"{p}.out"] = str(d.out_channels)
            out[f"{p}.spatial"] = str(d.expected_spatial)
            out[f"{p}.kernel"] = str(d.kernel)
            if d.spec is not None:
                out[f"{p}.branches"] = branches_to_text(d.spec.branches)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "GeneratorConfig":
        enc, dec = [], []
        for i in range(1, 9):
            p = f"enc.{i}"
            spec = None
            if f"{p}.branches" in d:
                spec = InceptionSpec(branches=branches_from_text(d[f"{p}.branches"]))
            enc.append(EncoderEntry(
                kind=d[f"{p}.kind"], stride=cfgmod.get_int(d, f"{p}.stride"),
                out_channels=cfgmod.get_int(d, f"{p}.out"),
                expected_spatial=cfgmod.get_int(d, f"{p}.spatial"),
                kernel=cfgmod.get_int(d, f"{p}.kernel"), spec=spec))
        for j in range(1, 9):
            p = f"dec.{j}"
            spec = None
            if f"{p}.branches" in d:
                spec = InceptionSpec(branches=branches_from_text(d[f"{p}.branches"]))
            dec.append(DecoderEntry(
                kind=d[f"{p}.kind"], upsample=cfgmod.get_bool(d, f"{p}.upsample"),
                skip_source=cfgmod.get_int(d, f"{p}.skip"),
                out_channels=cfgmod.get_int(d, f"{p}.out"),
                expected_spatial=cfgmod.get_int(d, f"{p}.spatial"),
                kernel=cfgmod.get_int(d, f"{p}.kernel"), spec=spec))
        return cls(input_resolution=cfgmod.get_int(d, "gen.resolution"),
                   channel_scale=cfgmod.get_float(d, "gen.channel_scale"),
                   norm_mode=d.get("gen.norm_mode", "scaled"),
                   encoder=enc, decoder=dec)

    def digest(self) -> int:
        return cfgmod.config_digest(self.to_dict())


class PConvLayer:
    """Plain partial conv, optionally followed by BN and an activation."""

    def __init__(self, params: Conv2dParams, bn: BatchNormState | None,
                 act: str | None, alpha: float, norm_mode: str):
        self.params = params
        self.bn = bn
        self.act = act
        self.alpha = alpha
        self.norm_mode = norm_mode

    def forward(self, x: MaskedActivation, mode: str = "train") -> MaskedActivation:
        out = partial_conv2d(x, self.params, self.norm_mode)
        feats = out.features
        if self.bn is not None:
            feats = batch_norm(feats, self.bn, mode)
        if self.act is not None:
            feats = activation(feats, self.act, self.alpha)
        return MaskedActivation(feats, out.mask)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("weight", self.params.weight)]
        if self.params.bias is not None:
            out.append(("bias", self.params.bias))
        if self.bn is not None:
            out.append(("bn.gamma", self.bn.gamma))
            out.append(("bn.beta", self.bn.beta))
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        if self.bn is None:
            return []
        return [("bn.running_mean", self.bn.running_mean),
                ("bn.running_var", self.bn.running_var)]


def _build_pconv_layer(cin: int, cout: int, kernel: int, stride: int, seed: int,
                       act: str | None, with_bn: bool, dtype, norm_mode: str) -> PConvLayer:
    std = float(np.sqrt(2.0 / (cin * kernel * kernel)))
    w = tensor_new((cout, cin, kernel, kernel), ("gaussian", 0.0, std),
                   seed=derive_seed(seed, "weight"), requires_grad=True, dtype=dtype)
    bias = None
    if not with_bn:  # a bias feeding BN is a dead direction; see inception.py
        bias = tensor_new((1, cout, 1, 1), ("constant", 0.0), requires_grad=True,
                          dtype=dtype)
    params = Conv2dParams(weight=w, bias=bias, stride=stride,
                          padding=kernel // 2)
    bn = BatchNormState(cout, dtype=dtype) if with_bn else None
    return PConvLayer(params, bn, act, LEAKY_ALPHA, norm_mode)


class Generator:
    def __init__(self, config: GeneratorConfig, enc_layers, dec_layers, dtype):
        self.config = config
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.dtype = dtype

    def forward(self, image: Tensor, mask: Tensor, mode: str = "train") -> MaskedActivation:
        """Raw completion F for a masked input. image is (N,3,R,R) with
        holes already zeroed or not; they are zeroed here either way."""
        net_in = MaskedActivation(mul(image, constant(mask.data.astype(image.dtype))),
                                  mask)
        cur = net_in
        enc_outs = []
        for layer in self.enc_layers:
            cur = layer.forward(cur, mode)
            enc_outs.append(cur)
        for j, (entry, layer) in enumerate(zip(self.config.decoder, self.dec_layers), 1):
            if entry.upsample:
                up_mask = np.repeat(np.repeat(cur.mask.data, 2, axis=2), 2, axis=3)
                cur = MaskedActivation(upsample_nearest(cur.features, 2),
                                       constant(up_mask))
            skip = net_in if entry.skip_source == 0 else enc_outs[entry.skip_source - 1]
            if skip.features.shape[2:] != cur.features.shape[2:]:
                raise ConstructionError(
                    f"skip junction mismatch at decoder layer {j}: "
                    f"{cur.features.shape} vs skip {skip.features.shape}")
            feats = concat_channels([cur.features, skip.features])
            joined_mask = np.maximum(cur.mask.data, skip.mask.data)
            cur = layer.forward(MaskedActivation(feats, constant(joined_mask)), mode)
        return cur

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.enc_layers, 1):
            out.extend((f"enc{i}.{n}", t) for n, t in layer.parameters())
        for j, layer in enumerate(self.dec_layers, 1):
            out.extend((f"dec{j}.{n}", t) for n, t in layer.parameters())
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.enc_layers, 1):
            out.extend((f"enc{i}.{n}", b) for n, b in layer.buffers())
        for j, layer in enumerate(self.dec_layers, 1):
            out.extend((f"dec{j}.{n}", b) for n, b in layer.buffers())
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        scope, rest = name.split(".", 1)
        layers = self.enc_layers if scope.startswith("enc") else self.dec_layers
        layer = layers[int(scope[3:]) - 1]
        bn = layer.bn
        if bn is None:
            raise IncompatibilityError(f"no BN state under {name}")
        if rest == "bn.running_mean":
            bn.running_mean = value.astype(bn.running_mean.dtype)
        elif rest == "bn.running_var":
            bn.running_var = value.astype(bn.running_var.dtype)
        else:
            raise IncompatibilityError(f"unknown buffer {name}")

    def capture_layer_input(self, name: str, image, mask) -> MaskedActivation:
        """Eval-mode forward that stops at the named layer and returns
        the masked activation it would read (feature visualization)."""
        img = _as_image_tensor(image, self.dtype)
        m = _as_mask_tensor(mask, img.shape[0], self.dtype)
        r = self.config.input_resolution
        if img.shape[2] != r or img.shape[3] != r:
            raise ShapeError(f"generator expects {r}x{r}, image is "
                             f"{img.shape[2]}x{img.shape[3]}")
        net_in = MaskedActivation(mul(img, constant(m.data.astype(img.dtype))), m)
        cur = net_in
        enc_outs = []
        for i, layer in enumerate(self.enc_layers, 1):
            if name == f"enc{i}":
                return cur
            cur = layer.forward(cur, "eval")
            enc_outs.append(cur)
        for j, (entry, layer) in enumerate(zip(self.config.decoder, self.dec_layers), 1):
            if entry.upsample:
                up_mask = np.repeat(np.repeat(cur.mask.data, 2, axis=2), 2, axis=3)
                cur = MaskedActivation(upsample_nearest(cur.features, 2),
                                       constant(up_mask))
            skip = net_in if entry.skip_source == 0 else enc_outs[entry.skip_source - 1]
            feats = concat_channels([cur.features, skip.features])
            joined = np.maximum(cur.mask.data, skip.mask.data)
            cur = MaskedActivation(feats, constant(joined))
            if name == f"dec{j}":
                return cur
            cur = layer.forward(cur, "eval")
        raise KeyError(name)

    def spatial_trace(self) -> dict[str, list[int]]:
        return self.config.spatial_trace()

    def layer_names(self) -> list[str]:
        return ([f"enc{i}" for i in range(1, 9)] + [f"dec{j}" for j in range(1, 9)])

    def get_layer(self, name: str):
        if name.startswith("enc"):
            return self.enc_layers[int(name[3:]) - 1]
        if name.startswith("dec"):
            return self.dec_layers[int(name[3:]) - 1]
        raise KeyError(name)


def build_generator(config: GeneratorConfig, seed: int, dtype=np.float32) -> Generator:
    config.validate()
    nm = config.norm_mode
    enc_layers = []
    cin = 3
    enc_outs = []
    for i, e in enumerate(config.encoder, 1):
        lseed = derive_seed(seed, f"enc{i}")
        if e.kind == "inception":
            spec = e.spec
            if spec is None:
                spec = default_inception_spec(cin, e.out_channels, layer_stride=e.stride,
                                              activation="relu")
            else:
                spec.layer_stride = e.stride
                spec.activation = "relu"
                spec.batch_norm = True
            if spec.out_channels != e.out_channels:
                raise ConstructionError(
                    f"encoder layer {i}: branches emit {spec.out_channels} channels, "
                    f"schedule says {e.out_channels}")
            enc_layers.append(build_inception(spec, cin, lseed, dtype=dtype, norm_mode=nm))
        elif e.kind == "pconv":
            enc_layers.append(_build_pconv_layer(cin, e.out_channels, e.kernel, e.stride,
                                                 lseed, "relu", True, dtype, nm))
        else:
            raise ConstructionError(f"encoder layer {i}: unknown kind {e.kind!r}")
        cin = e.out_channels
        enc_outs.append(e.out_channels)

    dec_layers = []
    prev = enc_outs[-1]
    for j, d in enumerate(config.decoder, 1):
        skip_c = 3 if d.skip_source == 0 else enc_outs[d.skip_source - 1]
        cin = prev + skip_c
        lseed = derive_seed(seed, f"dec{j}")
        final = j == 8
        if d.kind == "inception":
            spec = d.spec
            if spec is None:
                spec = default_inception_spec(cin, d.out_channels, layer_stride=1,
                                              activation="leaky_relu")
            else:
                spec.layer_stride = 1
                spec.activation = "leaky_relu"
                spec.batch_norm = True
            if spec.out_channels != d.out_channels:
                raise ConstructionError(
                    f"decoder layer {j}: branches emit {spec.out_channels} channels, "
                    f"schedule says {d.out_channels}")
            dec_layers.append(build_inception(spec, cin, lseed, dtype=dtype, norm_mode=nm))
        elif d.kind == "pconv":
            act = None if final else "leaky_relu"
            dec_layers.append(_build_pconv_layer(cin, d.out_channels, d.kernel, 1,
                                                 lseed, act, not final, dtype, nm))
        else:
            raise ConstructionError(f"decoder layer {j}: unknown kind {d.kind!r}")
        prev = d.out_channels
    return Generator(config, enc_layers, dec_layers, dtype)


def _as_image_tensor(image, dtype) -> Tensor:
    if isinstance(image, Tensor):
        data = image.data
    else:
        data = np.asarray(image)
        if data.ndim == 3:
            data = data[None]
    if data.ndim != 4 or data.shape[1] != 3:
        raise ShapeError(f"image must be (N,3,H,W) or (3,H,W), got {data.shape}")
    return Tensor(data, dtype=dtype)


def _as_mask_tensor(mask, n: int, dtype) -> Tensor:
    if isinstance(mask, MaskImage):
        data = mask.bits[None, None]
    elif isinstance(mask, Tensor):
        data = mask.data
    else:
        data = np.asarray(mask)
        if data.ndim == 2:
            data = data[None, None]
    if data.ndim != 4 or data.shape[1] != 1:
        raise ShapeError(f"mask must be (N,1,H,W) or (H,W), got {data.shape}")
    if data.shape[0] == 1 and n > 1:
        data = np.broadcast_to(data, (n,) + data.shape[1:]).copy()
    return constant(data.astype(dtype), dtype=dtype)


def inpaint(gen: Generator, image, mask) -> Tensor:
    """Complete an image: holes are zeroed, the network fills them, and
    the result keeps valid pixels untouched:

        result = clamp(mask * image + (1 - mask) * F, 0, 1)
    """
    img = _as_image_tensor(image, gen.dtype)
    r = gen.config.input_resolution
    if img.shape[2] != r or img.shape[3] != r:
        raise ShapeError(f"generator expects {r}x{r}, image is "
                         f"{img.shape[2]}x{img.shape[3]}")
    m = _as_mask_tensor(mask, img.shape[0], gen.dtype)
    if m.shape[2] != r or m.shape[3] != r:
        raise ShapeError(f"generator expects {r}x{r}, mask is {m.shape[2]}x{m.shape[3]}")
    out = gen.forward(img, m, mode="eval")
    inv = constant((1.0 - m.data).astype(gen.dtype))
    composite = add(mul(img, m), mul(out.features, inv))
    return clamp(composite, 0.0, 1.0)


def save_checkpoint(gen: Generator, path: str, iteration: int = 0,
                    opt_entries: dict[str, np.ndarray] | None = None) -> None:
    cfg = gen.config.to_dict()
    entries: dict[str, np.ndarray] = {}
    for name, t in gen.parameters():
        entries[f"param.{name}"] = t.data
    for name, b in gen.buffers():
        entries[f"buffer.{name}"] = b
    if opt_entries:
        for name, arr in opt_entries.items():
            entries[f"opt.{name}"] = arr
    write_checkpoint_file(path, cfgmod.config_digest(cfg), iteration,
                          cfgmod.canonical_text(cfg), entries)


def load_checkpoint(path: str, expected: GeneratorConfig | None = None
                    ) -> tuple[Generator, dict[str, np.ndarray], int]:
    """Rebuild a generator from a checkpoint. Returns (generator,
    optimizer entries, iteration). A full parse happens before any model
    state is created, so failures leave nothing half-loaded."""
    digest, iteration, text, entries = read_checkpoint_file(path)
    cfg_dict = cfgmod.parse_config_text(text, source=path)
    if cfgmod.config_digest(cfg_dict) != digest:
        raise IncompatibilityError(f"{path}: config text does not match its digest")
    config = GeneratorConfig.from_dict(cfg_dict)
    if expected is not None and expected.digest() != digest:
        raise IncompatibilityError(
            f"{path}: checkpoint config digest {digest:#018x} does not match the "
            f"requested configuration {expected.digest():#018x}")
    dtypes = {e.dtype for e in entries.values()}
    dtype = np.float64 if np.dtype(np.float64) in dtypes else np.float32
    gen = build_generator(config, seed=0, dtype=dtype)
    params = dict(gen.parameters())
    seen = set()
    opt_entries: dict[str, np.ndarray] = {}
    for name, arr in entries.items():
        if name.startswith("param."):
            key = name[len("param."):]
            if key not in params:
                raise IncompatibilityError(f"{path}: unexpected parameter {key}")
            if params[key].data.shape != arr.shape:
                raise IncompatibilityError(
                    f"{path}: shape mismatch for {key}: "
                    f"{arr.shape} vs {params[key].data.shape}")
            params[key].data = arr.astype(dtype)
            seen.add(key)
        elif name.startswith("buffer."):
            gen.set_buffer(name[len("buffer."):], arr)
        elif name.startswith("opt."):
            opt_entries[name[len("opt."):]] = arr
        else:
            raise IncompatibilityError(f"{path}: unknown entry {name}")
    missing = set(params) - seen
    if missing:
        raise IncompatibilityError(f"{path}: missing parameters: {sorted(missing)[:4]}")
    return gen, opt_entries, iteration
