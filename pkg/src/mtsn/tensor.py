"""Dense tensors with reverse-mode automatic differentiation.

The engine is a thin tape over numpy arrays: every operation whose inputs
carry gradients records an :class:`OpNode` (inputs, output, backward rule).
:meth:`ComputationGraph.trace` collects the nodes behind one root tensor in
topological order without recursion, and ``backward`` replays them in
reverse, summing gradients over fan-out.

Only the operations the models in this package need are provided, and
elementwise broadcasting is deliberately restricted to size-1-against-any
or equal shapes: a smaller surface is easier to keep provably correct.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    EmptySequenceError,
    NumericError,
)

Number = Union[int, float]

_CHECKED = False


def set_checked(flag: bool) -> bool:
    """Enable or disable NaN/Inf scanning of every op output.

    Returns the previous setting so callers can restore it.
    """
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    return prev


def checked_enabled() -> bool:
    return _CHECKED


def _require_finite(data: np.ndarray, who: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{who}'")


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer.

    ``data`` is always a float32 or float64 numpy array (float64 by
    default: gradient checks are unreliable in single precision).
    ``grad``, when populated, has exactly the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op: Optional[OpNode] = None
        self.name = name
        if _CHECKED:
            _require_finite(arr, name or "tensor")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A gradient-free view of the same values."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Populate gradients of everything this scalar tensor depends on."""
        graph = ComputationGraph.trace(self)
        backward(graph, self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    # arithmetic sugar; scalars are wrapped as gradient-free constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


class OpNode:
    """One applied operation: the inputs, the output, and its backward rule.

    ``backward_fn`` maps the gradient at the output to one gradient per
    input (``None`` for inputs that need none).
    """

    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name: str, inputs: tuple, output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"OpNode({self.name}, in={len(self.inputs)})"


def custom_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Record one operation on the tape and return its output tensor.

    This is the single extension point: layer-level fused operations (the
    GRU sequence kernel) register themselves through it exactly like the
    built-in ops below.
    """
    if _CHECKED:
        _require_finite(out_data, name)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        out.op = OpNode(name, tuple(inputs), out, backward_fn)
    return out


class ComputationGraph:
    """Topologically ordered record of the ops behind one root tensor."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationGraph":
        """Collect every ancestor op of ``root``, inputs before consumers.

        Iterative post-order walk: sequence models create graphs far deeper
        than the interpreter recursion limit.
        """
        ops: list = []
        visited: set = set()
        stack: list = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                ops.append(t.op)
                continue
            if t.op is None or id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for inp in t.op.inputs:
                stack.append((inp, False))
        return cls(ops)


def backward(graph: ComputationGraph, root: Tensor) -> None:
    """Reverse-accumulate gradients from a scalar root through ``graph``.

    Gradients are summed over fan-out. Every tensor in the graph with
    ``requires_grad`` ends up with a populated ``grad``; the root is seeded
    with ones.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    root.grad = np.ones_like(root.data)
    for node in reversed(graph.ops):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
            inp.grad += g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_elementwise(name: str, a: Tensor, b: Tensor) -> None:
    if a.size != 1 and b.size != 1 and a.shape != b.shape:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # undo size-1 broadcasting by total summation
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) * np.ones(shape, dtype=g.dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return custom_op("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return custom_op("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return custom_op("mul", (a, b), out, bwd)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_stable(x.data)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return custom_op("sigmoid", (x,), y, bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return custom_op("tanh", (x,), y, bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bwd(g):
        return (g * y,)

    return custom_op("exp", (x,), y, bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    y = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return custom_op("log", (x,), y, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (m,k)@(k,n) -> (m,n), or (m,k)@(k,) -> (m,)."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise DimensionError(
            f"matmul expects 2-D by 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    if b.data.ndim == 2:
        def bwd(g):
            return g @ b.data.T, a.data.T @ g
    else:
        def bwd(g):
            return np.outer(g, b.data), a.data.T @ g

    return custom_op("matmul", (a, b), out, bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for a single vector, or row-wise for a (rows, in) matrix.

    ``w`` is (out, in) and ``b`` is (out,). The fused backward keeps the
    elementwise ops' broadcasting rules untouched.
    """
    if w.data.ndim != 2 or b.data.ndim != 1 or w.shape[0] != b.shape[0]:
        raise DimensionError(f"affine: weight {w.shape} and bias {b.shape} disagree")
    if x.data.ndim == 1:
        if x.shape[0] != w.shape[1]:
            raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
        out = w.data @ x.data + b.data

        def bwd(g):
            return g @ w.data, np.outer(g, x.data), g.copy()
    elif x.data.ndim == 2:
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
        out = x.data @ w.data.T + b.data

        def bwd(g):
            return g @ w.data, g.T @ x.data, g.sum(axis=0)
    else:
        raise DimensionError(f"affine: input must be 1-D or 2-D, got {x.shape}")

    return custom_op("affine", (x, w, b), out, bwd)


# ---------------------------------------------------------------------------
# softmax and reductions


def _softmax_stable(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax(x: Tensor) -> Tensor:
    """Probability vector over a 1-D input, max-subtracted for stability."""
    if x.data.ndim != 1 or x.shape[0] < 1:
        raise DimensionError(f"softmax expects a nonempty 1-D input, got {x.shape}")
    y = _softmax_stable(x.data)

    def bwd(g):
        return (y * (g - np.dot(g, y)),)

    return custom_op("softmax", (x,), y, bwd)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data), dtype=x.dtype)

    def bwd(g):
        return (np.ones_like(x.data) * g,)

    return custom_op("sum", (x,), out, bwd)


def mean_over_time(x: Tensor) -> Tensor:
    """Column means of a (T, d) sequence."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_over_time expects (T, d), got {x.shape}")
    t = x.shape[0]
    if t < 1:
        raise EmptySequenceError("mean_over_time: empty sequence")
    out = x.data.mean(axis=0)

    def bwd(g):
        return (np.broadcast_to(g / t, x.shape),)

    return custom_op("mean_over_time", (x,), out, bwd)


def max_over_time(x: Tensor) -> Tensor:
    """Column maxima of a (T, d) sequence.

    The backward routes each column's gradient to its argmax row; ties go
    to the smallest time index so replays are deterministic.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"max_over_time expects (T, d), got {x.shape}")
    t, d = x.shape
    if t < 1:
        raise EmptySequenceError("max_over_time: empty sequence")
    idx = np.argmax(x.data, axis=0)  # first occurrence == smallest time index
    cols = np.arange(d)
    out = x.data[idx, cols]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx, cols] = g
        return (gx,)

    return custom_op("max_over_time", (x,), out, bwd)


def pick(x: Tensor, index: int) -> Tensor:
    """Select one element of a 1-D tensor as a scalar."""
    if x.data.ndim != 1:
        raise DimensionError(f"pick expects a 1-D input, got {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise ContractError(f"pick: index {index} out of range for length {x.shape[0]}")
    out = np.asarray(x.data[index], dtype=x.dtype)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return custom_op("pick", (x,), out, bwd)
