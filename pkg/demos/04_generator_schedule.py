"""
The 8+8 generator and its non-monotone schedule
===============================================

Eight encoder and eight decoder layers. The odd detail worth seeing:
encoder layer 4 runs at stride 1, so layers 4 and 5 read the same
spatial extent (32x32 for a 256 input). Skips wire decoder i to
encoder 8-i, with the last decoder reading the raw input.
"""

import numpy as np

from dign.generator import GeneratorConfig, build_generator
from dign.pconv import mask_coverage
from dign.tensor import constant, tensor_new

for res in (256, 64):
    cfg = GeneratorConfig(input_resolution=res)
    enc = [e.expected_spatial for e in cfg.encoder]
    dec = [d.expected_spatial for d in cfg.decoder]
    print(f"input {res}:")
    print("  encoder extents", enc)
    print("  decoder extents", dec)
    print("  layer kinds    ",
          [e.kind for e in cfg.encoder])

# A runnable instance, scaled down 8x in channels to stay quick.
cfg = GeneratorConfig(input_resolution=64, channel_scale=1 / 8)
gen = build_generator(cfg, seed=0)
n_params = sum(int(np.prod(t.shape)) for _, t in gen.parameters())
print(f"\nbuilt {len(gen.enc_layers)}+{len(gen.dec_layers)} layers, "
      f"{n_params} trainable values")

img = tensor_new((1, 3, 64, 64), ("uniform", 0.0, 1.0), seed=1)
mask = np.ones((1, 1, 64, 64), dtype=np.float32)
mask[:, :, 20:44, 12:52] = 0.0
out = gen.forward(img, constant(mask), mode="eval")
print("forward:", tuple(img.shape), "->", tuple(out.features.shape))

# Watch the hole close as the encoder descends: coverage is the valid
# fraction of the mask each layer reads (enc2 reads enc1's output and
# so on), finishing with the network output's mask.
reads = [gen.capture_layer_input(f"enc{i}", img.data[0], mask[0, 0]).mask.data
         for i in range(2, 9)]
cover = mask_coverage([mask] + reads + [out.mask.data])
for i, c in enumerate(cover[:-1], 1):
    print(f"  encoder {i} reads valid fraction {c:.3f}")
print("final output mask all-valid:", cover[-1] == 1.0)
