"""Dense 4-D tensors with tape-based reverse-mode differentiation.

Every value in the package is a (N, C, H, W) float32 or float64 array.
Operations executed while an :class:`OpGraph` is active are recorded on
that tape; :func:`backward` replays the tape once, in reverse, and
deposits gradients on the leaf tensors that asked for them.  Without an
active graph the same operations run as plain numpy, which is what
inference and finite-difference probes use.

float32 is the working precision; gradient checking builds the whole
graph in float64 (see gradcheck.py).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, GraphStateError, ShapeError
from .rng import Stream

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A 4-D array, optionally carrying a gradient buffer.

    Tensors created directly are graph leaves; tensors produced by
    operations are interior results and never own a ``grad`` buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, _leaf: bool = True):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (N, C, H, W); got ndim={arr.ndim}")
        if any(e <= 0 for e in arr.shape):
            raise ShapeError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = _leaf

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operators compose graph ops; scalars are allowed on either side.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def constant(data, dtype=None) -> Tensor:
    """Leaf tensor that never takes gradients (masks, ratios, targets)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


class _Node:
    __slots__ = ("tag", "inputs", "out", "backward")

    def __init__(self, tag, inputs, out, backward):
        self.tag = tag
        self.inputs = inputs
        self.out = out
        self.backward = backward


class OpGraph:
    """Recorded forward tape.  Execution order is topological by
    construction; backward walks it once in reverse and then the tape is
    spent."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAPH_STACK.pop()
        return False


_GRAPH_STACK: list[OpGraph] = []


def _active_graph() -> OpGraph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def apply_op(tag: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap a computed result and record it when a graph is listening.

    ``backward`` maps the output gradient to one gradient (or None) per
    input, in order.  It is only ever called once.
    """
    out = Tensor(out_data, _leaf=False)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        if graph.consumed:
            raise GraphStateError("recording onto a consumed graph; start a new forward pass")
        out.requires_grad = True
        graph.nodes.append(_Node(tag, tuple(inputs), out, backward))
    return out


def backward(graph: OpGraph, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The graph is consumed: a second call needs a fresh forward pass.
    """
    if graph.consumed:
        raise GraphStateError("graph already consumed by a previous backward")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    produced = any(node.out is loss for node in graph.nodes)
    if not produced:
        raise GraphStateError("loss was not produced by a forward pass recorded on this graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if t.is_leaf:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            else:
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
    graph.consumed = True
    graph.nodes.clear()


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    for ax in range(4):
        if shape[ax] == 1 and g.shape[ax] > 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    for ea, eb in zip(a.shape, b.shape):
        if ea != eb and ea != 1 and eb != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + float(b)
        return apply_op("add_scalar", [a], out, lambda g: (g,))
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return apply_op("add", [a, b], out,
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return apply_op("sub", [a, b], out,
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op("mul", [a, b], out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s
    return apply_op("scale", [a], out, lambda g: (g * s,))


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Spec-level elementwise dispatch: add | sub | mul | scale.

    Tensor-tensor forms require exactly equal shapes; ``scale`` takes a
    scalar second operand.
    """
    if op == "scale":
        if isinstance(b, Tensor):
            raise ContractError("scale takes a scalar second operand")
        return scale(a, b)
    if not isinstance(b, Tensor):
        raise ContractError(f"{op} takes two tensors")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def sum_all(a: Tensor) -> Tensor:
    """Reduce to a (1,1,1,1) scalar tensor."""
    out = a.data.sum(dtype=a.dtype).reshape(1, 1, 1, 1)
    shape, dtype = a.shape, a.dtype
    return apply_op("sum", [a], out,
                    lambda g: (np.full(shape, g.reshape(()), dtype=dtype),))


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)  # 0 at the kink, matching the subgradient policy
    return apply_op("abs", [a], out, lambda g: (g * sign,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.dtype)
    return apply_op("clamp", [a], out, lambda g: (g * inside,))


def tensor_new(shape, fill=("constant", 0.0), seed: int = 0,
               requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Create a leaf tensor.

    ``fill`` is one of ("constant", v), ("uniform", lo, hi) or
    ("gaussian", mean, std).  Random fills are bitwise deterministic for a
    fixed seed; see rng.py for the stream definition.
    """
    shape = tuple(int(e) for e in shape)
    if len(shape) != 4 or any(e <= 0 for e in shape):
        raise ShapeError(f"need 4 positive extents, got {shape}")
    kind = fill[0]
    if kind == "constant":
        data = np.full(shape, float(fill[1]), dtype=dtype)
    elif kind == "uniform":
        lo, hi = float(fill[1]), float(fill[2])
        if not lo < hi:
            raise ContractError(f"uniform fill needs lo < hi, got [{lo}, {hi})")
        data = Stream(seed).uniform(shape, lo, hi).astype(dtype)
    elif kind == "gaussian":
        mean, std = float(fill[1]), float(fill[2])
        if std < 0:
            raise ContractError(f"gaussian fill needs std >= 0, got {std}")
        data = Stream(seed).gaussian(shape, mean, std).astype(dtype)
    else:
        raise ContractError(f"unknown fill kind {kind!r}")
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)
