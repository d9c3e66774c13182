"""
Partial convolution on a holed image
====================================

A partial convolution only trusts valid pixels: each window's sum is
renormalized by how much of the window it could actually see, windows
that saw nothing output exactly zero, and the mask itself shrinks one
kernel-reach per layer.
"""

import numpy as np

from dign.ops import Conv2dParams, conv2d
from dign.pconv import MaskedActivation, partial_conv2d
from dign.tensor import constant, tensor_new


def show(tag, plane):
    print(tag)
    for row in plane:
        print("   " + " ".join("#" if v else "." for v in row))


# A 9x9 image with a 5x5 hole punched in the middle.
x = tensor_new((1, 1, 9, 9), ("uniform", 0.5, 1.5), seed=3, dtype=np.float64)
mask = np.ones((1, 1, 9, 9))
mask[:, :, 2:7, 2:7] = 0.0
show("input mask (# = valid):", mask[0, 0].astype(int))

# One 3x3 partial conv. The averaging kernel makes the renormalization
# visible: every output stays on the scale of the input, no matter how
# little of the window was valid.
w = constant(np.full((1, 1, 3, 3), 1.0 / 9.0), dtype=np.float64)
p = Conv2dParams(weight=w, padding=1)
out = partial_conv2d(MaskedActivation(x, constant(mask, dtype=np.float64)), p)

show("mask after one 3x3 layer:", out.mask.data[0, 0].astype(int))
print("window means, hole row 4:", np.round(out.features.data[0, 0, 4], 3))
print("(zeros exactly where no valid pixel was reachable)")

# Stack a second layer and the hole keeps closing.
out2 = partial_conv2d(out, p)
show("mask after two layers:", out2.mask.data[0, 0].astype(int))

# Degeneracy: with nothing masked, a partial conv IS a standard conv.
ones = constant(np.ones((1, 1, 9, 9)), dtype=np.float64)
plain = conv2d(x, p)
pc = partial_conv2d(MaskedActivation(x, ones), p)
print("all-valid mask, max |partial - standard|:",
      np.abs(pc.features.data - plain.data).max())
