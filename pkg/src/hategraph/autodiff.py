"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: dense numpy storage, a fixed set of
primitives (exactly the ones the classifier needs), and a tape built
implicitly by parent links on output tensors.  Graphs stay tiny (a few
hundred nodes per video), so there is no fusion, no broadcasting beyond
the bias rule documented on :func:`add`, and no sparse matrix type.

Training runs in float32; gradient checks should build float64 tensors
(``dtype=np.float64``), where finite differences are meaningful.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's shape rule."""


class GradientWarning(UserWarning):
    """A requested parameter was not reached by the backward sweep."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    # Tensors recorded on a tape must never be mutated in place; the
    # backward closures capture these arrays by reference.
    arr.flags.writeable = False
    return arr


class Tensor:
    """A dense array plus the bookkeeping reverse mode needs.

    ``parents`` and ``_backward`` are set only by primitives and only when
    the result requires grad; leaves have neither.  ``grad`` is a free slot
    for callers (``gradients`` itself is pure and does not touch it).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self.parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def astype(self, dtype) -> "Tensor":
        """Leaf copy of this tensor in another float width."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        op = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad}{op})"

    # Operator sugar for the common primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def constant(data, dtype=None) -> Tensor:
    """A leaf tensor that never requires grad."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _check_same_dtype(op: str, tensors) -> np.dtype:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")
    return tensors[0].dtype


def _result(op: str, data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _freeze(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward
    else:
        out.op = None
        out.parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic

def _bias_broadcastable(a_shape, b_shape) -> bool:
    # The one broadcast rule we support: a is (m, n) and b is (n,) or (1, n).
    if len(a_shape) != 2:
        return False
    n = a_shape[1]
    return b_shape == (n,) or b_shape == (1, n)


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    summed = grad.sum(axis=0)
    return summed.reshape(shape)


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if _bias_broadcastable(a.shape, b.shape) or _bias_broadcastable(b.shape, a.shape):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the second operand may be a (n,) / (1, n) bias row."""
    _check_same_dtype("add", (a, b))
    _binary_shapes("add", a, b)
    data = a.data + b.data

    def backward(g):
        return (_reduce_to(g, a.shape), _reduce_to(g, b.shape))

    return _result("add", data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", (a, b))
    _binary_shapes("sub", a, b)
    data = a.data - b.data

    def backward(g):
        return (_reduce_to(g, a.shape), -_reduce_to(g, b.shape))

    return _result("sub", data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product, same broadcast rule as add."""
    _check_same_dtype("elementwise-mul", (a, b))
    _binary_shapes("elementwise-mul", a, b)
    data = a.data * b.data

    def backward(g):
        return (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape))

    return _result("elementwise-mul", data, (a, b), backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * a.dtype.type(c)

    def backward(g):
        return (g * a.dtype.type(c),)

    return _result("scalar-mul", data, (a,), backward)


# ---------------------------------------------------------------------------
# Linear algebra / shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", (a, b))
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _result("matmul", data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-D tensor, got {a.shape}")
    data = np.ascontiguousarray(a.data.T)

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _result("transpose", data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate 2-D tensors along axis 0 or 1 (or 1-D tensors along 0)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: needs at least one input")
    _check_same_dtype("concat", tensors)
    ndim = tensors[0].ndim
    if any(t.ndim != ndim for t in tensors):
        raise ShapeError("concat: mixed ranks")
    if axis not in range(ndim):
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    other = 1 - axis if ndim == 2 else None
    if other is not None:
        widths = {t.shape[other] for t in tensors}
        if len(widths) > 1:
            raise ShapeError(f"concat: non-concat dims differ: {sorted(widths)}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return _result("concat", data, tensors, backward)


def row_sum(a: Tensor) -> Tensor:
    """Sum over rows: (m, n) -> (1, n)."""
    if a.ndim != 2:
        raise ShapeError(f"row-sum: needs a 2-D tensor, got {a.shape}")
    data = a.data.sum(axis=0, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("row-sum", data, (a,), backward)


def row_mean(a: Tensor) -> Tensor:
    """Mean over rows: (m, n) -> (1, n)."""
    if a.ndim != 2:
        raise ShapeError(f"row-mean: needs a 2-D tensor, got {a.shape}")
    m = a.shape[0]
    data = a.data.mean(axis=0, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / a.dtype.type(m), a.shape).copy(),)

    return _result("row-mean", data, (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices are allowed."""
    if a.ndim != 2:
        raise ShapeError(f"gather-rows: needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather-rows: indices must be a flat list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(
            f"gather-rows: index out of range for {a.shape[0]} rows: {idx.tolist()}"
        )
    data = a.data[idx]

    def backward(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result("gather-rows", data, (a,), backward)


def scatter_add_rows(a: Tensor, indices, size: int) -> Tensor:
    """Accumulate row i of ``a`` into output row ``indices[i]`` of a (size, n) zero tensor."""
    if a.ndim != 2:
        raise ShapeError(f"scatter-add-rows: needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise ShapeError(
            f"scatter-add-rows: need one index per row ({a.shape[0]}), got {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"scatter-add-rows: index out of range for size {size}")
    data = np.zeros((size, a.shape[1]), dtype=a.dtype)
    np.add.at(data, idx, a.data)

    def backward(g):
        return (g[idx],)

    return _result("scatter-add-rows", data, (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities

def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - data * data),)

    return _result("tanh", data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(a.dtype)

    def backward(g):
        return (g * data * (1.0 - data),)

    return _result("sigmoid", data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, a.dtype.type(0))

    def backward(g):
        return (g * (a.data > 0),)

    return _result("relu", data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    slope = a.dtype.type(float(slope))
    data = np.where(a.data > 0, a.data, a.data * slope)

    def backward(g):
        return (g * np.where(a.data > 0, a.dtype.type(1), slope),)

    return _result("leaky-relu", data, (a,), backward)


def log(a: Tensor) -> Tensor:
    """Natural log; rejects non-positive inputs (clamp before calling)."""
    if np.any(a.data <= 0):
        raise ValueError("log: inputs must be strictly positive")
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _result("log", data, (a,), backward)


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    """Numerically stable softmax along ``axis`` of a 1-D or 2-D tensor."""
    if a.ndim not in (1, 2):
        raise ShapeError(f"softmax: needs a 1-D or 2-D tensor, got {a.shape}")
    if axis not in range(a.ndim):
        raise ShapeError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _result("softmax", data, (a,), backward)


# ---------------------------------------------------------------------------
# Primitive registry and graph traversal

_PRIMITIVES = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "elementwise-mul": lambda inputs, attrs: mul(*inputs),
    "scalar-mul": lambda inputs, attrs: scalar_mul(inputs[0], attrs["scalar"]),
    "concat": lambda inputs, attrs: concat(inputs, axis=attrs.get("axis", 0)),
    "row-mean": lambda inputs, attrs: row_mean(*inputs),
    "row-sum": lambda inputs, attrs: row_sum(*inputs),
    "tanh": lambda inputs, attrs: tanh(*inputs),
    "sigmoid": lambda inputs, attrs: sigmoid(*inputs),
    "relu": lambda inputs, attrs: relu(*inputs),
    "leaky-relu": lambda inputs, attrs: leaky_relu(inputs[0], attrs.get("slope", 0.2)),
    "softmax": lambda inputs, attrs: softmax(inputs[0], axis=attrs.get("axis", 0)),
    "log": lambda inputs, attrs: log(*inputs),
    "gather-rows": lambda inputs, attrs: gather_rows(inputs[0], attrs["indices"]),
    "scatter-add-rows": lambda inputs, attrs: scatter_add_rows(
        inputs[0], attrs["indices"], attrs["size"]
    ),
    "transpose": lambda inputs, attrs: transpose(*inputs),
}


def apply_primitive(op: str, inputs, attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by id; the registry above is the full op set."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(list(inputs), attrs or {})


def primitive_ids() -> tuple[str, ...]:
    return tuple(_PRIMITIVES)


@dataclass
class GraphNode:
    op: str
    inputs: tuple
    output: "Tensor"


@dataclass
class ComputationGraph:
    """Topologically ordered view of the tape that produced a tensor."""

    nodes: list
    leaves: list


def trace(root: Tensor) -> ComputationGraph:
    """Collect the tape below ``root`` in topological (parents-first) order."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    nodes = [GraphNode(t.op, t.parents, t) for t in order if t.op is not None]
    leaves = [t for t in order if t.op is None]
    return ComputationGraph(nodes=nodes, leaves=leaves)


def gradients(loss: Tensor, params) -> list:
    """Return d(loss)/d(p) for each p in ``params`` via one reverse sweep.

    The tape is read-only here: adjoints accumulate in a side table, so the
    same recorded graph can be differentiated again.  Parameters that the
    loss does not depend on get a zero gradient and a GradientWarning.
    """
    if loss.size != 1:
        raise ShapeError(f"gradients: loss must be scalar, got shape {loss.shape}")
    params = list(params)
    graph = trace(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(graph.nodes):
        out = node.output
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        parent_grads = out._backward(g)
        for parent, pg in zip(node.inputs, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            slot = adjoint.get(id(parent))
            if slot is None:
                adjoint[id(parent)] = pg
            else:
                adjoint[id(parent)] = slot + pg
    results = []
    for p in params:
        g = adjoint.get(id(p))
        if g is None:
            if p.requires_grad:
                warnings.warn(
                    "parameter not reached by the loss graph; returning zero gradient",
                    GradientWarning,
                    stacklevel=2,
                )
            g = np.zeros(p.shape, dtype=p.dtype)
        results.append(g)
    return results
