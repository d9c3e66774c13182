"""
Inpainting and feature maps from the command line
=================================================

Everything the library does is reachable through the `dign` console
script. This drives the same entry point in-process: fill a hole with
the tiny demo checkpoint, then dump what each inception branch saw.
"""

import os
import runpy

import numpy as np
from PIL import Image

from dign.cli import main

here = os.path.dirname(__file__)
run = os.path.join(here, "out", "tiny_run")
ckpt = os.path.join(run, "checkpoint.bin")

# Standalone: train the tiny checkpoint first if demo 07 hasn't run.
if not os.path.exists(ckpt):
    print("no checkpoint yet; running the tiny training demo first\n")
    runpy.run_path(os.path.join(here, "07_overfit_tiny.py"))

out_dir = os.path.join(here, "out", "inpaint")
os.makedirs(out_dir, exist_ok=True)

# Punch a hole in one of the training images and ask for a fill.
image = os.path.join(run, "images", "img_2.png")
hole = np.ones((32, 32), dtype=np.uint8) * 255
hole[10:22, 8:26] = 0
mask_path = os.path.join(out_dir, "hole.png")
Image.fromarray(hole).save(mask_path)

filled = os.path.join(out_dir, "filled.png")
assert main(["inpaint", "--ckpt", ckpt, "--image", image,
             "--mask", mask_path, "--out", filled]) == 0

# Valid pixels pass through untouched; only the hole is synthesized.
before = np.asarray(Image.open(image).convert("RGB"))
after = np.asarray(Image.open(filled).convert("RGB"))
same = (before == after).all(axis=-1)
print("pixels changed outside the hole:", int((~same & (hole > 0)).sum()))
print("pixels synthesized inside it:  ", int((~same & (hole == 0)).sum()))

# Feature visualization: one grayscale map per branch channel of a
# chosen inception layer. File names carry branch index and kind.
maps = os.path.join(out_dir, "maps")
assert main(["viz-features", "--ckpt", ckpt, "--image", image,
             "--mask", mask_path, "--layer", "enc3",
             "--channels", "2", "--out", maps]) == 0
for name in sorted(os.listdir(maps)):
    print("  ", name)
