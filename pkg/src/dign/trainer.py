"""Training loop: data ingestion, mask pairing, Adam, checkpoints.

Sampling is stateless: iteration i draws from a stream seeded by
derive_seed(seed, "batch", i), so a resumed run replays the exact
batches of an uninterrupted one. At 64-bit precision the continuation
is bitwise.

The metrics log is line-delimited:
    iter<TAB>hole_l1<TAB>valid_l1<TAB>perc<TAB>style<TAB>total
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ParseError, TrainingError
from .generator import (GeneratorConfig, Generator, build_generator,
                        load_checkpoint, save_checkpoint)
from .imgio import _check_ext, load_image, load_mask_raster
from .losses import FeatureExtractor, LossWeights, total_loss
from .rng import Stream, derive_seed
from .tensor import OpGraph, Tensor, add, backward, constant, mul, zero_grads

log = logging.getLogger("dign.trainer")

_CKPT_NAME = "checkpoint.bin"
_METRICS_NAME = "metrics.tsv"


def worker_cap(requested: int = 1) -> int:
    """Ingestion worker count, bounded by the DIGN_THREADS environment
    variable. Decoding here is synchronous, so this is a cap, not a
    demand; deterministic runs keep it at 1 regardless."""
    cap = os.environ.get("DIGN_THREADS")
    if cap is None:
        return max(1, requested)
    try:
        limit = int(cap)
        if limit < 1:
            raise ValueError
    except ValueError:
        raise ParseError(f"DIGN_THREADS must be a positive integer, got {cap!r}")
    return max(1, min(requested, limit))


class AdamState:
    """Bias-corrected Adam. Moment buffers appear on first touch and
    shape-match their parameters; t counts completed steps."""

    def __init__(self, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        if lr <= 0 or epsilon <= 0:
            raise TrainingError(f"lr and epsilon must be positive, got {lr}, {epsilon}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise TrainingError(f"betas must be in [0,1), got {beta1}, {beta2}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(named_params, state: AdamState, grads=None) -> None:
    """One update over (name, tensor) pairs. Gradients default to each
    tensor's .grad buffer; a missing gradient counts as zero."""
    items = list(named_params)
    if grads is None:
        grads = [t.grad for _, t in items]
    if len(grads) != len(items):
        raise TrainingError(f"{len(items)} parameters but {len(grads)} gradients")
    for (name, t), g in zip(items, grads):
        if g is None:
            continue
        if g.shape != t.data.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match "
                                f"{name} {t.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    # epsilon sits on the bias-corrected denominator: lr * mhat / (sqrt(vhat) + eps)
    c1 = 1.0 / (1.0 - b1 ** t)
    c2 = 1.0 / (1.0 - b2 ** t)
    for (name, p), g in zip(items, grads):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data = p.data - state.lr * (m * c1) / (np.sqrt(v * c2) + state.epsilon)


@dataclass
class TrainConfig:
    image_dir: str = ""
    mask_dir: str = ""
    out_dir: str = ""
    resolution: int = 256
    batch_size: int = 16
    iterations: int = 1000
    channel_scale: float = 1.0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_interval: int = 100
    seed: int = 0
    fx_seed: int = 23
    precision: str = "f32"

    def validate(self):
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.resolution < 16 or self.resolution % 16 != 0:
            raise TrainingError(
                f"resolution must be a positive multiple of 16, got {self.resolution}")
        if self.iterations < 0:
            raise TrainingError(f"iterations must be >= 0, got {self.iterations}")
        if self.checkpoint_interval < 1:
            raise TrainingError(
                f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}")
        if self.precision not in ("f32", "f64"):
            raise TrainingError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.channel_scale <= 0:
            raise TrainingError(f"channel_scale must be positive, got {self.channel_scale}")
        self.weights.validate()

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(input_resolution=self.resolution,
                               channel_scale=self.channel_scale)


class _Folder:
    """Sorted file listing with validation up front and a bounded decode
    cache. Unreadable files are dropped once, with a warning."""

    _CACHE_LIMIT = 64

    def __init__(self, directory: str, resolution: int, loader, label: str):
        self.resolution = resolution
        self.loader = loader
        if not os.path.isdir(directory):
            raise TrainingError(f"{label} directory does not exist: {directory}")
        names = sorted(n for n in os.listdir(directory)
                       if os.path.splitext(n)[1].lower() in (".png", ".ppm"))
        self.paths = []
        for n in names:
            p = os.path.join(directory, n)
            try:
                with Image.open(p) as im:
                    im.verify()
            except Exception as e:
                log.warning("skipping unreadable %s file %s: %s", label, p, e)
                continue
            self.paths.append(p)
        if not self.paths:
            raise TrainingError(f"no usable {label} files in {directory}")
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.paths)

    def get(self, i: int) -> np.ndarray:
        p = self.paths[i]
        hit = self._cache.get(p)
        if hit is None:
            if len(self._cache) >= self._CACHE_LIMIT:
                self._cache.clear()
            hit = self._cache[p] = self.loader(p, self.resolution)
        return hit


class ImageFolder(_Folder):
    def __init__(self, directory: str, resolution: int):
        super().__init__(directory, resolution,
                         lambda p, r: load_image(p, resize=r), "image")


class MaskFolder(_Folder):
    def __init__(self, directory: str, resolution: int):
        super().__init__(directory, resolution,
                         lambda p, r: load_mask_raster(p, resize=r), "mask")


def make_batch(images: ImageFolder, masks: MaskFolder, stream: Stream,
               cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Uniform independent pairing: image indices are drawn first, then
    mask indices, so one stream gives one reproducible batch."""
    b, r = cfg.batch_size, cfg.resolution
    img_idx = [stream.randint(0, len(images)) for _ in range(b)]
    mask_idx = [stream.randint(0, len(masks)) for _ in range(b)]
    imgs = np.stack([images.get(i) for i in img_idx]).astype(cfg.dtype)
    bits = np.stack([masks.get(i) for i in mask_idx]).astype(cfg.dtype)
    return imgs, bits.reshape(b, 1, r, r)


def _append_metrics(path: str, it: int, terms: dict[str, float]) -> None:
    row = (f"{it}\t{terms['hole_l1']!r}\t{terms['valid_l1']!r}\t"
           f"{terms['perc']!r}\t{terms['style']!r}\t{terms['total']!r}\n")
    with open(path, "a") as f:
        f.write(row)


def train_step(gen: Generator, imgs: np.ndarray, bits: np.ndarray,
               fx: FeatureExtractor, weights: LossWeights,
               state: AdamState) -> dict[str, float]:
    """One optimization step; returns the loss breakdown (pre-update)."""
    x = constant(imgs)
    m = constant(bits)
    inv = constant((1.0 - bits).astype(bits.dtype))
    with OpGraph() as g:
        out = gen.forward(x, m, mode="train")  # holes are zeroed inside
        composite = add(mul(x, m), mul(out.features, inv))
        loss, terms = total_loss(x, out.features, composite, m, fx, weights)
    if not math.isfinite(terms["total"]):
        raise TrainingError(f"loss became non-finite: {terms}")
    named = gen.parameters()
    backward(g, loss)
    adam_step(named, state)
    zero_grads([t for _, t in named])
    return terms


def train(cfg: TrainConfig, resume: str | None = None) -> dict:
    """Run the loop; returns a summary with the checkpoint path, the
    metrics path, and the last loss breakdown. On a non-finite loss the
    run aborts with the last written checkpoint intact."""
    cfg.validate()
    worker_cap(1)
    gen_cfg = cfg.generator_config()
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.out_dir, _CKPT_NAME)
    metrics_path = os.path.join(cfg.out_dir, _METRICS_NAME)

    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    if resume is not None:
        gen, opt_entries, start = load_checkpoint(resume, expected=gen_cfg)
        if gen.dtype != cfg.dtype:
            raise TrainingError(
                f"checkpoint precision {np.dtype(gen.dtype).name} does not match "
                f"configured {cfg.precision}")
        for name, arr in opt_entries.items():
            kind, pname = name.split(".", 1)
            if kind == "m":
                state.m[pname] = arr.copy()
            elif kind == "v":
                state.v[pname] = arr.copy()
        state.t = start
    else:
        gen = build_generator(gen_cfg, derive_seed(cfg.seed, "init"), dtype=cfg.dtype)
        start = 0
        open(metrics_path, "w").close()

    fx = FeatureExtractor.default(seed=cfg.fx_seed, dtype=cfg.dtype)
    images = ImageFolder(cfg.image_dir, cfg.resolution)
    masks = MaskFolder(cfg.mask_dir, cfg.resolution)

    def save(it: int):
        opt = {}
        for name, arr in state.m.items():
            opt[f"m.{name}"] = arr
        for name, arr in state.v.items():
            opt[f"v.{name}"] = arr
        save_checkpoint(gen, ckpt_path, iteration=it, opt_entries=opt)

    if start == 0:
        save(0)  # a 0-iteration run leaves the initialization on disk
    terms: dict[str, float] = {}
    for it in range(start + 1, cfg.iterations + 1):
        stream = Stream(derive_seed(cfg.seed, "batch", it))
        imgs, bits = make_batch(images, masks, stream, cfg)
        terms = train_step(gen, imgs, bits, fx, cfg.weights, state)
        _append_metrics(metrics_path, it, terms)
        if it % cfg.checkpoint_interval == 0 or it == cfg.iterations:
            save(it)
        log.debug("iter %d: %s", it, terms)
    return {"iterations": max(start, cfg.iterations), "checkpoint": ckpt_path,
            "metrics": metrics_path, "last": terms}
