"""Finite-difference validation of the tape's gradients.

The whole graph must be built in float64 for this to mean anything;
float32 forward noise is larger than the quantity being measured.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import OpGraph, Tensor, backward, zero_grads


def grad_check(build: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference grads.

    ``build`` must be deterministic, produce a scalar tensor, and read the
    current contents of ``params`` each call.  Every element of every
    parameter is perturbed by +-eps independently:

        rel = |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("grad_check params must be float64")
        if not p.requires_grad:
            raise ContractError("grad_check params must require grad")

    zero_grads(params)
    with OpGraph() as graph:
        loss = build()
    if loss.data.size != 1:
        raise ContractError("build() must return a scalar loss")
    backward(graph, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    def run() -> float:
        out = build()
        return float(out.data.reshape(()))

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f_hi = run()
            flat[i] = keep - eps
            f_lo = run()
            flat[i] = keep
            numeric = (f_hi - f_lo) / (2.0 * eps)
            rel = abs(a_flat[i] - numeric) / max(1e-8, abs(a_flat[i]) + abs(numeric))
            if rel > worst:
                worst = rel
    zero_grads(params)
    return worst
