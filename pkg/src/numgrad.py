"""
Dense float64 tensors with reverse-mode automatic differentiation.

A ``Value`` wraps a numpy array and remembers which op produced it. Ops are
recorded dynamically on every forward pass; ``backward`` orders the reachable
nodes into a ``Tape`` and replays their local derivative rules in reverse.
Only what the encoder, the projection experts, both losses and the optimizer
need is provided.
"""

from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from src.errors import ContractError, DegenerateEmbeddingError, DimensionError, NonFiniteError

# Tensors are plain float64 numpy arrays
Tensor = np.ndarray

NORM_EPS = 1e-12


def as_tensor(data) -> Tensor:
    """Convert array-like input to a float64 tensor, rejecting NaN/Inf."""
    array = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise NonFiniteError("input tensor contains NaN or Inf")
    return array


class Value:
    """A tensor node in the autodiff graph."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Value"] = (),
        _op: str = "leaf",
    ):
        self.data: Tensor = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else as_tensor(data)
        self.grad: Tensor = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self.name = name
        self.op = _op
        self._parents = tuple(_parents)
        self._backward: Optional[Callable[[], None]] = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Value":
        """Same data, no history and no gradient (stop-gradient)."""
        return Value(self.data, requires_grad=False, name=self.name)

    def backward(self) -> List["Value"]:
        return backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, op={self.op}{label})"

    # operators

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Value:
    """A leaf that never receives gradient."""
    return data.detach() if isinstance(data, Value) else Value(as_tensor(data))


def parameter(data, name: Optional[str] = None) -> Value:
    """A trainable leaf."""
    return Value(as_tensor(data), requires_grad=True, name=name)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _result(data: Tensor, parents: Sequence[Value], op: str) -> Value:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs_grad = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=needs_grad, _parents=parents if needs_grad else (), _op=op)


def _unbroadcast(grad: Tensor, shape) -> Tensor:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ops


def add(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    out = _result(data, (a, b), "add")

    def _backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.shape)

    out._backward = _backward
    return out


def mul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    out = _result(data, (a, b), "mul")

    def _backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * a.data, b.shape)

    out._backward = _backward
    return out


def neg(x: Value) -> Value:
    out = _result(-x.data, (x,), "neg")

    def _backward():
        x.grad -= out.grad

    out._backward = _backward
    return out


def exp(x: Value) -> Value:
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    out = _result(data, (x,), "exp")

    def _backward():
        x.grad += out.grad * out.data

    out._backward = _backward
    return out


def relu(x: Value) -> Value:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = _result(np.where(mask, x.data, 0.0), (x,), "relu")

    def _backward():
        x.grad += out.grad * mask

    out._backward = _backward
    return out


# linear algebra


def matmul(a: Value, b: Value) -> Value:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data @ b.data
    out = _result(data, (a, b), "matmul")

    def _backward():
        if a.requires_grad:
            a.grad += out.grad @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ out.grad

    out._backward = _backward
    return out


def log_softmax(x: Value, axis: int = -1) -> Value:
    """x - logsumexp(x) along ``axis``, stabilized by max subtraction."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _result(shifted - lse, (x,), "log_softmax")

    def _backward():
        probs = np.exp(out.data)
        x.grad += out.grad - probs * out.grad.sum(axis=axis, keepdims=True)

    out._backward = _backward
    return out


def cosine_rows(Z: Value, c: Value) -> Value:
    """Cosine similarity between every row of ``Z`` (n x d) and vector ``c`` (d)."""
    Z, c = _lift(Z), _lift(c)
    if Z.ndim != 2 or c.ndim != 1 or Z.shape[1] != c.shape[0]:
        raise DimensionError(f"cosine_rows expects (n x d, d), got {Z.shape} and {c.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        row_norms = np.sqrt(np.einsum("ij,ij->i", Z.data, Z.data))
        c_norm = float(np.sqrt(c.data @ c.data))
    if not (np.all(np.isfinite(row_norms)) and np.isfinite(c_norm)):
        raise NonFiniteError("cosine_rows: embedding norm overflowed")
    if row_norms.size and row_norms.min() <= NORM_EPS:
        raise DegenerateEmbeddingError("cosine_rows: embedding row with norm <= 1e-12")
    if c_norm <= NORM_EPS:
        raise DegenerateEmbeddingError("cosine_rows: center with norm <= 1e-12")
    dots = Z.data @ c.data
    sims = dots / (row_norms * c_norm)
    out = _result(sims, (Z, c), "cosine_rows")

    def _backward():
        g = out.grad
        if Z.requires_grad:
            scale = (g / (row_norms * c_norm))[:, None]
            Z.grad += scale * c.data[None, :] - (g * sims / row_norms**2)[:, None] * Z.data
        if c.requires_grad:
            c.grad += (g / (row_norms * c_norm)) @ Z.data - (g * sims).sum() / c_norm**2 * c.data

    out._backward = _backward
    return out


def reduce(x: Value, kind: str = "sum") -> Value:
    """Reduce every element to a scalar by ``sum`` or ``mean``."""
    if kind not in ("sum", "mean"):
        raise ContractError(f"reduce kind must be 'sum' or 'mean', got '{kind}'")
    if x.size == 0:
        raise DimensionError(f"reduce({kind}) of an empty input")
    scale = 1.0 if kind == "sum" else 1.0 / x.size
    out = _result(np.array(x.data.sum() * scale), (x,), kind)

    def _backward():
        x.grad += np.full(x.shape, float(out.grad) * scale)

    out._backward = _backward
    return out


# indexing


def take_rows(x: Value, index) -> Value:
    """Gather rows (first axis) of ``x``."""
    idx = np.asarray(index, dtype=np.intp)
    out = _result(x.data[idx], (x,), "take_rows")

    def _backward():
        np.add.at(x.grad, idx, out.grad)

    out._backward = _backward
    return out


def pick(x: Value, columns) -> Value:
    """Element ``x[i, columns[i]]`` of every row."""
    cols = np.asarray(columns, dtype=np.intp)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise DimensionError(f"pick expects n x k input and n columns, got {x.shape} / {cols.shape}")
    rows = np.arange(x.shape[0])
    out = _result(x.data[rows, cols], (x,), "pick")

    def _backward():
        np.add.at(x.grad, (rows, cols), out.grad)

    out._backward = _backward
    return out


def scatter_rows(parts: Sequence[Value], index_lists: Sequence, n: int) -> Value:
    """Assemble an n-row tensor whose rows ``index_lists[j]`` come from ``parts[j]``."""
    parts = [_lift(p) for p in parts]
    indices = [np.asarray(ix, dtype=np.intp) for ix in index_lists]
    if len(parts) != len(indices):
        raise DimensionError("scatter_rows: one index list per part is required")
    if not parts:
        raise DimensionError("scatter_rows: nothing to assemble")
    width = parts[0].shape[1:]
    data = np.zeros((n,) + tuple(width))
    for part, idx in zip(parts, indices):
        if part.shape[0] != idx.size or part.shape[1:] != width:
            raise DimensionError(f"scatter_rows: part of shape {part.shape} for {idx.size} rows")
        data[idx] = part.data
    out = _result(data, tuple(parts), "scatter_rows")

    def _backward():
        for part, idx in zip(parts, indices):
            if part.requires_grad:
                part.grad += out.grad[idx]

    out._backward = _backward
    return out


# backward pass


class Tape:
    """Op records reachable from a root, in topological (creation-consistent) order."""

    def __init__(self, root: Value):
        self.root = root
        self.nodes: List[Value] = _topological_order(root)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def leaves(self) -> List[Value]:
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]

    def replay(self) -> None:
        # reverse topological order: every node after all of its consumers
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward()


def _topological_order(root: Value) -> List[Value]:
    order: List[Value] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Value) -> List[Value]:
    """
    Populate ``grad`` of every trainable leaf reachable from a scalar root.

    Args:
        root: Scalar Value produced by a forward pass

    Returns:
        The trainable leaves that received gradient
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise ContractError("backward already ran on this root; rebuild the forward pass")
    tape = Tape(root)
    root.grad = np.ones_like(root.data)
    tape.replay()
    root._consumed = True
    return tape.leaves()


def zero_grad(params: Iterable[Value]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def finite_difference_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central finite-difference gradient of a scalar function of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-3) -> float:
    """Max elementwise |a - n| / max(floor, |a| + |n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(floor, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
