"""8-bit PNG/PPM image I/O. Nothing else is accepted.

Images move through the package as (C, H, W) float arrays in [0, 1];
masks as (H, W) binary rasters (0 = hole, 1 = valid) that live on disk
as 0/255 single-channel PNGs.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import ParseError

_EXTS = (".png", ".ppm")


def _check_ext(path: str) -> None:
    ext = os.path.splitext(path)[1].lower()
    if ext not in _EXTS:
        raise ParseError(f"{path}: only {', '.join(_EXTS)} are supported, got {ext!r}")


def load_image(path: str, resize: int | None = None) -> np.ndarray:
    """Read an 8-bit image as (3, H, W) float32 in [0, 1]. With resize,
    the image is scaled to resize x resize with bilinear resampling."""
    _check_ext(path)
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            if resize is not None and rgb.size != (resize, resize):
                rgb = rgb.resize((resize, resize), Image.BILINEAR)
            arr = np.asarray(rgb, dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ParseError(f"cannot read image {path}: {e}") from e
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def save_image(path: str, img: np.ndarray) -> None:
    """Write (3, H, W) or (1, H, W) floats in [0, 1] as an 8-bit image."""
    _check_ext(path)
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ParseError(f"save_image wants (1|3, H, W), got {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    mode = "RGB" if arr.shape[0] == 3 else "L"
    if mode == "L":
        data = data[:, :, 0]
    try:
        Image.fromarray(data, mode=mode).save(path)
    except OSError as e:
        raise ParseError(f"cannot write image {path}: {e}") from e


def load_mask_raster(path: str, resize: int | None = None) -> np.ndarray:
    """Read a mask PNG as (H, W) uint8 of 0/1 (0 = hole).

    Hand-drawn masks need not be pure 0/255; anything >= 128 counts as
    valid. Generated masks are exact 0/255 and round-trip bitwise.
    """
    _check_ext(path)
    try:
        with Image.open(path) as im:
            gray = im.convert("L")
            if resize is not None and gray.size != (resize, resize):
                gray = gray.resize((resize, resize), Image.NEAREST)  # keeps it binary
            arr = np.asarray(gray, dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ParseError(f"cannot read mask {path}: {e}") from e
    return (arr >= 128).astype(np.uint8)


def save_mask_raster(path: str, bits: np.ndarray) -> None:
    """Write an (H, W) 0/1 raster as a 0/255 single-channel PNG."""
    _check_ext(path)
    arr = np.asarray(bits)
    if arr.ndim != 2:
        raise ParseError(f"mask raster must be 2-D, got {arr.shape}")
    try:
        Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(path)
    except OSError as e:
        raise ParseError(f"cannot write mask {path}: {e}") from e
