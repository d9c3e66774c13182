"""
Inception branches and the bottleneck arithmetic
================================================

Why multi-branch layers: one layer sees 1x1, 3x3 and 5x5 context at
once, and a 1x1 bottleneck makes the wide branches affordable. The
numbers below are the classic 4x cut on the 5x5 branch.
"""

from dign.inception import (BranchSpec, InceptionSpec, branches_from_text,
                            branches_to_text, build_inception,
                            default_inception_spec, param_breakdown,
                            param_count)

# A direct 5x5 from 128 to 256 channels, versus the same branch routed
# through a 32-channel 1x1 reduction first.
direct = InceptionSpec(branches=[BranchSpec("conv", 256, kernel=5),
                                 BranchSpec("conv", 1, kernel=1)])
reduced = InceptionSpec(branches=[BranchSpec("conv", 256, kernel=5,
                                             bottleneck_channels=32),
                                  BranchSpec("conv", 1, kernel=1)])

d = param_breakdown(direct, 128)["branches"][0]
r = param_breakdown(reduced, 128)["branches"][0]
print(f"direct 5x5, 128->256:      {d['weights']:>7} weights")
for s in r["stages"]:
    print(f"  bottleneck {s['stage']:<7}       {s['weights']:>7} weights")
print(f"main-stage ratio:          {d['weights'] / 204800:.1f}x")

# The default block splits its output budget over four branches:
# 1x1, 3x3 (bottlenecked), a decomposed 5x5, and max-pool + 1x1.
spec = default_inception_spec(64, 128)
print("\ndefault 64->128 block:")
for b in spec.branches:
    print(f"  {b.kind:<15} kernel {b.kernel}  out {b.out_channels:>3}"
          f"  bottleneck {b.bottleneck_channels or '-'}")
print("total parameters:", param_count(spec, 64))

# Branch layouts serialize to a one-line text form and back, so configs
# can name architectures without code.
text = branches_to_text(spec.branches)
print("\nas text:", text)
assert branches_to_text(branches_from_text(text)) == text

# And the blocks are buildable and runnable, of course.
layer = build_inception(spec, 64, seed=1)
print("built layer with", len(layer.branches), "branches")
