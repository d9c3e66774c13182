"""Random mask generation: geometric shapes and frontier growth.

Two generators produce binary masks (0 = hole, 1 = valid):

* shape masks scatter rectangles, circles, ellipses and stroked
  polyline "strings" with random size, rotation and position, resampling
  until the hole fraction lands in the configured range;
* growth masks pick an interior seed pixel and expand a ragged blob by
  a frontier random walk (each popped frontier pixel becomes hole and
  enqueues its 4-neighbors with probability p), then dilate by a random
  disk radius. Pre-dilation holes are 4-connected by construction.

Everything is driven by the package RNG, so a (seed, config, size)
triple maps to one exact mask forever.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GenerationError
from .imgio import save_mask_raster
from .rng import Stream, WordBuffer, derive_seed

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
SHAPE_KINDS = ("rectangle", "circle", "ellipse", "string")


@dataclass
class MaskImage:
    """Binary raster; 0 marks holes to fill, 1 marks valid pixels."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise GenerationError(f"mask raster must be 2-D, got shape {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise GenerationError("mask values must be exactly 0 or 1")
        self.bits = arr.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def hole_fraction(self) -> float:
        return float((self.bits == 0).mean())


@dataclass
class ShapeMaskConfig:
    shape_weights: dict[str, float] = field(
        default_factory=lambda: {k: 1.0 for k in SHAPE_KINDS})
    count_range: tuple[int, int] = (1, 6)
    size_range: tuple[float, float] = (0.08, 0.45)   # fraction of each axis
    rotation_range: tuple[float, float] = (0.0, 2.0 * np.pi)
    hole_fraction: tuple[float, float] = (0.05, 0.5)
    max_attempts: int = 64

    def validate(self):
        lo, hi = self.hole_fraction
        if not (lo >= 0.01 and hi <= 0.9 and lo < hi):
            raise GenerationError(
                f"shape hole_fraction must satisfy 0.01 <= lo < hi <= 0.9, got [{lo}, {hi}]")
        if set(self.shape_weights) - set(SHAPE_KINDS):
            raise GenerationError(f"unknown shapes in {sorted(self.shape_weights)}")
        if not any(w > 0 for w in self.shape_weights.values()):
            raise GenerationError("all shape weights are zero")
        if self.count_range[0] < 1 or self.count_range[0] > self.count_range[1]:
            raise GenerationError(f"bad count_range {self.count_range}")
        if not 0 < self.size_range[0] <= self.size_range[1] <= 1:
            raise GenerationError(f"bad size_range {self.size_range}")
        if self.max_attempts < 1:
            raise GenerationError(f"max_attempts must be positive, got {self.max_attempts}")


@dataclass
class GrowthMaskConfig:
    enqueue_p: float = 0.6
    step_budget: int | None = None       # None: 4*w*h at generation time
    hole_fraction: tuple[float, float] = (0.05, 0.5)
    dilation_radius: tuple[int, int] = (1, 3)
    max_attempts: int = 16

    def validate(self):
        if not 0 < self.enqueue_p <= 1:
            raise GenerationError(f"enqueue_p must be in (0,1], got {self.enqueue_p}")
        if self.step_budget is not None and self.step_budget < 1:
            raise GenerationError(f"step_budget must be positive, got {self.step_budget}")
        lo, hi = self.hole_fraction
        if not (0 <= lo < hi < 1):
            raise GenerationError(
                f"growth hole_fraction must satisfy 0 <= lo < hi < 1, got [{lo}, {hi}]")
        if not 0 <= self.dilation_radius[0] <= self.dilation_radius[1]:
            raise GenerationError(f"bad dilation_radius {self.dilation_radius}")
        if self.max_attempts < 1:
            raise GenerationError(f"max_attempts must be positive, got {self.max_attempts}")


def _grid(w: int, h: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def _rasterize_shape(kind: str, stream: Stream, w: int, h: int,
                     cfg: ShapeMaskConfig) -> np.ndarray:
    """Boolean hole footprint for one sampled shape. Pure point-in-shape
    tests against the analytic form; no anti-aliasing."""
    xs, ys = _grid(w, h)
    cx = stream.random() * w
    cy = stream.random() * h
    lo, hi = cfg.size_range
    s1 = lo + stream.random() * (hi - lo)
    s2 = lo + stream.random() * (hi - lo)
    rlo, rhi = cfg.rotation_range
    theta = rlo + stream.random() * (rhi - rlo)

    if kind == "circle":
        r = s1 * min(w, h) / 2.0
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r

    if kind in ("rectangle", "ellipse"):
        a = s1 * w / 2.0
        b = s2 * h / 2.0
        u = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
        v = -(xs - cx) * np.sin(theta) + (ys - cy) * np.cos(theta)
        if kind == "rectangle":
            return (np.abs(u) <= a) & (np.abs(v) <= b)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0

    # string: random polyline of 4-12 segments stroked with a width of
    # 1-5% of min(w,h)
    n_seg = stream.randint(4, 13)
    half = (0.01 + stream.random() * 0.04) * min(w, h) / 2.0
    half = max(half, 0.5)
    px, py = cx, cy
    hole = np.zeros((h, w), dtype=bool)
    for _ in range(n_seg):
        ang = stream.random() * 2.0 * np.pi
        length = (0.05 + stream.random() * 0.15) * min(w, h)
        qx = min(max(px + length * np.cos(ang), 0.0), w - 1.0)
        qy = min(max(py + length * np.sin(ang), 0.0), h - 1.0)
        dx, dy = qx - px, qy - py
        seg2 = dx * dx + dy * dy
        if seg2 == 0:
            d2 = (xs - px) ** 2 + (ys - py) ** 2
        else:
            t = np.clip(((xs - px) * dx + (ys - py) * dy) / seg2, 0.0, 1.0)
            d2 = (xs - (px + t * dx)) ** 2 + (ys - (py + t * dy)) ** 2
        hole |= d2 <= half * half
        px, py = qx, qy
    return hole


def gen_shape_mask(rng_seed: int, cfg: ShapeMaskConfig, w: int, h: int) -> MaskImage:
    cfg.validate()
    if w < 4 or h < 4:
        raise GenerationError(f"mask size {w}x{h} too small")
    stream = Stream(derive_seed(rng_seed, "shape-mask"))
    kinds = [k for k in SHAPE_KINDS if cfg.shape_weights.get(k, 0) > 0]
    weights = [cfg.shape_weights[k] for k in kinds]
    lo, hi = cfg.hole_fraction
    for _ in range(cfg.max_attempts):
        count = stream.randint(cfg.count_range[0], cfg.count_range[1] + 1)
        hole = np.zeros((h, w), dtype=bool)
        for _ in range(count):
            kind = stream.weighted_choice(kinds, weights)
            hole |= _rasterize_shape(kind, stream, w, h, cfg)
        frac = hole.mean()
        if lo <= frac <= hi:
            return MaskImage(np.where(hole, 0, 1).astype(np.uint8))
    raise GenerationError(
        f"no shape mask with hole fraction in [{lo}, {hi}] after "
        f"{cfg.max_attempts} attempts (size {w}x{h}, sizes {cfg.size_range}, "
        f"counts {cfg.count_range})")


def _grow_blob(stream: Stream, w: int, h: int, p: float, budget: int,
               target: float) -> np.ndarray | None:
    """Frontier random walk from an interior seed. Returns the boolean
    hole raster, or None if the frontier died before any stop rule."""
    words = WordBuffer(stream)
    x0 = words.randint(1, w - 1) if w > 2 else words.randint(0, w)
    y0 = words.randint(1, h - 1) if h > 2 else words.randint(0, h)
    hole = np.zeros((h, w), dtype=bool).tolist()
    queued = [row[:] for row in hole]
    frontier = [(y0, x0)]
    queued[y0][x0] = True
    total = w * h
    stop = int(np.ceil(target * total))
    holes = 0
    for _ in range(budget):
        if not frontier:
            break
        i = words.randint(0, len(frontier))
        y, x = frontier[i]
        frontier[i] = frontier[-1]
        frontier.pop()
        hole[y][x] = True
        holes += 1
        if holes >= stop:
            break
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and not hole[ny][nx] and not queued[ny][nx]:
                if words.random() < p:
                    frontier.append((ny, nx))
                    queued[ny][nx] = True
    if holes == 0:
        return None
    return np.array(hole, dtype=bool)


def gen_growth_mask(rng_seed: int, cfg: GrowthMaskConfig, w: int, h: int) -> MaskImage:
    cfg.validate()
    if w < 4 or h < 4:
        raise GenerationError(f"mask size {w}x{h} too small")
    stream = Stream(derive_seed(rng_seed, "growth-mask"))
    lo, hi = cfg.hole_fraction
    budget = cfg.step_budget if cfg.step_budget is not None else 4 * w * h
    shrink = 1.0
    for _ in range(cfg.max_attempts):
        rlo, rhi = cfg.dilation_radius
        radius = stream.randint(rlo, rhi + 1) if rhi > rlo else rlo
        target = (lo + stream.random() * (hi - lo)) * shrink
        hole = _grow_blob(stream, w, h, cfg.enqueue_p, budget, target)
        if hole is None:
            continue
        if radius > 0:
            hole = _dilate_hole(hole, radius)
        frac = hole.mean()
        if lo <= frac <= hi:
            return MaskImage(np.where(hole, 0, 1).astype(np.uint8))
        if frac > hi:
            shrink *= 0.6  # dilation overshot; aim lower and regrow
    raise GenerationError(
        f"no growth mask with hole fraction in [{lo}, {hi}] after "
        f"{cfg.max_attempts} attempts (budget {budget}, size {w}x{h})")


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    return xs * xs + ys * ys <= r * r


def _dilate_hole(hole: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return hole
    return ndimage.binary_dilation(hole, structure=_disk(radius))


def dilate(mask: MaskImage, radius: int) -> MaskImage:
    """Grow the hole by a disk of the given radius; radius 0 is identity."""
    if radius < 0:
        raise GenerationError(f"dilation radius must be non-negative, got {radius}")
    hole = mask.bits == 0
    return MaskImage(np.where(_dilate_hole(hole, radius), 0, 1).astype(np.uint8))


def mask_stats(mask: MaskImage) -> dict:
    """hole_fraction, 4-connected component count, and per-component
    bounding boxes as (row0, col0, row1, col1), end-exclusive."""
    hole = mask.bits == 0
    labels, n = ndimage.label(hole, structure=_FOUR)
    boxes = []
    for sl in ndimage.find_objects(labels):
        if sl is not None:
            boxes.append((sl[0].start, sl[1].start, sl[0].stop, sl[1].stop))
    return {"hole_fraction": float(hole.mean()),
            "component_count": int(n),
            "bounding_boxes": boxes}


def write_mask_dataset(n: int, out_dir: str, mix: str, seed: int,
                       w: int = 256, h: int = 256,
                       shape_cfg: ShapeMaskConfig | None = None,
                       growth_cfg: GrowthMaskConfig | None = None) -> list[dict]:
    """Emit n mask PNGs (0/255) plus a TSV manifest; returns the manifest
    rows. mix "both" alternates shape (even index) and growth (odd)."""
    if mix not in ("shape", "growth", "both"):
        raise GenerationError(f"mix must be shape|growth|both, got {mix!r}")
    if n < 0:
        raise GenerationError(f"count must be non-negative, got {n}")
    shape_cfg = shape_cfg if shape_cfg is not None else ShapeMaskConfig()
    growth_cfg = growth_cfg if growth_cfg is not None else GrowthMaskConfig()
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise GenerationError(f"cannot create {out_dir}: {e}") from e

    rows = []
    for i in range(n):
        use_shape = mix == "shape" or (mix == "both" and i % 2 == 0)
        kind = "shape" if use_shape else "growth"
        mask_seed = derive_seed(seed, kind, i)
        if use_shape:
            mask = gen_shape_mask(mask_seed, shape_cfg, w, h)
        else:
            mask = gen_growth_mask(mask_seed, growth_cfg, w, h)
        name = f"mask_{i:05d}.png"
        path = os.path.join(out_dir, name)
        try:
            save_mask_raster(path, mask.bits)
        except Exception as e:
            raise GenerationError(f"cannot write {path}: {e}") from e
        st = mask_stats(mask)
        rows.append({"filename": name, "generator": kind, "seed": mask_seed,
                     "hole_fraction": st["hole_fraction"],
                     "components": st["component_count"]})

    manifest = os.path.join(out_dir, "manifest.tsv")
    try:
        with open(manifest, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(f"{r['filename']}\t{r['generator']}\t{r['seed']}\t"
                         f"{r['hole_fraction']!r}\t{r['components']}\n")
    except OSError as e:
        raise GenerationError(f"cannot write {manifest}: {e}") from e
    return rows
