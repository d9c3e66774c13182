"""
Tensors, the tape, and checking a gradient
==========================================

Every later demo rides on this: 4-D tensors, a recorded forward pass,
one reverse sweep, and a finite-difference cross-check.
"""

import numpy as np

from dign.gradcheck import grad_check
from dign.tensor import OpGraph, backward, mul, sub, sum_all, tensor_new

# Build two small tensors. Everything in this library is (N, C, H, W),
# even scalars like the loss (they come out as (1, 1, 1, 1)).
a = tensor_new((1, 2, 3, 3), ("gaussian", 0.0, 1.0), seed=1,
               requires_grad=True, dtype=np.float64)
b = tensor_new((1, 2, 3, 3), ("uniform", -1.0, 1.0), seed=2,
               requires_grad=True, dtype=np.float64)

# Record a forward pass on a tape. Ops only listen while a graph is
# open, so inference code pays nothing for autodiff.
with OpGraph() as g:
    loss = sum_all(mul(sub(a, b), sub(a, b)))   # sum (a - b)^2

backward(g, loss)
print("loss              ", loss.data.item())
print("d loss / d a [0,0]", a.grad[0, 0])
print("expected 2(a-b)   ", (2 * (a.data - b.data))[0, 0])

# The same check, automated: central differences against the tape for
# every element of every parameter. Numbers near 1e-9 mean the backward
# rule matches the function, not just our expectations.
err = grad_check(lambda: sum_all(mul(sub(a, b), sub(a, b))), [a, b])
print(f"finite-difference max relative error: {err:.3e}")
