"""
The four-term objective
=======================

Reconstruction L1 split by region (hole vs valid), a perceptual term on
extracted features, and a style term on their Gram matrices. The
weighted sum is what training minimizes.
"""

import numpy as np

from dign.losses import (FeatureExtractor, LossWeights, gram, masked_l1,
                         perceptual_loss, style_loss, total_loss)
from dign.tensor import constant, tensor_new

F64 = np.float64

# Ground truth, a corrupted "network output", and a mask with one hole.
x = tensor_new((1, 3, 32, 32), ("uniform", 0.0, 1.0), seed=1, dtype=F64)
noise = tensor_new((1, 3, 32, 32), ("gaussian", 0.0, 0.15), seed=2, dtype=F64)
output = constant(np.clip(x.data + noise.data, 0, 1), dtype=F64)
mask = np.ones((1, 1, 32, 32))
mask[:, :, 8:22, 10:26] = 0.0

hole, valid = masked_l1(x, output, mask)
print(f"hole L1  {hole.data.item():.5f}   valid L1 {valid.data.item():.5f}")

# Perceptual and style terms run on a fixed, seed-built feature stack,
# and on the composite (truth pasted over valid pixels) in training.
fx = FeatureExtractor.default(seed=23, dtype=F64)
print(f"perceptual {perceptual_loss(output, x, fx).data.item():.5f}")
print(f"style      {style_loss(output, x, fx).data.item():.5f}")

# Gram matrices are symmetric and positive semi-definite by
# construction; style distance is L1 between them.
feats = fx.features(x)[0]
g = gram(feats).data[0, 0]
print("gram shape", g.shape, "symmetric:", bool(np.array_equal(g, g.T)),
      " min eigenvalue:", float(np.linalg.eigvalsh(g).min()))

# The full objective, with its breakdown. Identical inputs zero it.
w = LossWeights(w_hole=6.0, w_valid=1.0, w_perc=0.05, w_style=120.0)
composite = constant(x.data * mask + output.data * (1 - mask), dtype=F64)
total, terms = total_loss(x, output, composite, mask, fx, w)
print("total", round(total.data.item(), 5), " terms",
      {k: round(v, 5) for k, v in terms.items()})

zero, _ = total_loss(x, x, x, mask, fx, w)
print("self-comparison total:", zero.data.item())
