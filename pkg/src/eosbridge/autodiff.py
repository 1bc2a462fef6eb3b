"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The design is deliberately minimal: a ``Tensor`` wraps a C-contiguous float64
ndarray, and every differentiable operation appends one node to the active
``Graph`` (a tape). Because nodes are appended in execution order, the tape is
already topologically sorted; ``backward`` walks it once in reverse, calling
each node's gradient closure. Gradients accumulate with ``+=`` so a tensor
consumed by several ops receives the sum of its branch gradients.

There is no broadcasting beyond adding/subtracting a trailing-axis vector
(bias-style). Everything is float64 so finite-difference checks at 1e-4
relative tolerance are meaningful. Ops executed with no active graph simply
skip recording, which is how inference paths avoid tape overhead.

Thread safety: the active graph is thread-local; one graph must only ever be
used from a single thread. Tensors not attached to a graph are immutable in
practice and safe to share.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import DegenerateEmbeddingError, DegenerateRowError, GraphError, ShapeError

# Additive attention-mask sentinel. Large enough that exp() underflows to
# exactly 0.0 after max-subtraction, small enough to never produce inf/NaN.
NEG_SENTINEL = -1e9
FORBIDDEN_CUTOFF = -1e8

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_active = threading.local()


class Node:
    """One recorded operation: output tensor plus a gradient closure."""

    __slots__ = ("out", "backward_fn")

    def __init__(self, out: "Tensor", backward_fn: Callable[[np.ndarray], None]):
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape; append order is the topological order.

    Use as a context manager to make it the active graph for the current
    thread. After ``backward`` the graph must be ``reset()`` before it can
    record or replay again.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active.stack.pop()

    def reset(self) -> None:
        """Clear the tape so the graph can be reused for a fresh forward pass."""
        self.nodes.clear()
        self.consumed = False


def active_graph() -> Optional[Graph]:
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense n-dimensional float64 array with optional gradient.

    ``values`` exposes the flat row-major buffer; ``shape`` the dimensions.
    Tensors with ``requires_grad=False`` never accumulate gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the underlying buffer."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copy of the values, cut off from any graph and gradient."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(value: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[["Tensor"], Callable[[np.ndarray], None]]) -> Tensor:
    """Build the output tensor and record it on the active graph if needed."""
    out = Tensor(value)
    out.requires_grad = any(t.requires_grad for t in inputs)
    graph = active_graph()
    if out.requires_grad and graph is not None:
        if graph.consumed:
            raise GraphError("graph already consumed by backward; call reset() first")
        out.node = Node(out, backward_fn(out))
        graph.nodes.append(out.node)
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss over the active graph.

    Populates ``grad`` on every requires_grad tensor reachable from the loss,
    accumulating across fan-out. The graph is marked consumed and must be
    reset before recording again.
    """
    graph = active_graph()
    if graph is None:
        raise GraphError("backward called with no active graph")
    if graph.consumed:
        raise GraphError("graph already consumed by backward; call reset() first")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    graph.consumed = True
    loss._accum(np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        g = node.out.grad
        if g is None:
            continue
        node.backward_fn(g)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# recorded operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors. dA = g @ B^T, dB = A^T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    value = a.data @ b.data

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)
        return bw

    return _result(value, (a, b), make)


def _check_addsub_shapes(a: Tensor, b: Tensor) -> bool:
    """Return True when b broadcasts as a trailing-axis vector over a."""
    if a.shape == b.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"incompatible shapes for add/subtract: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a trailing-axis vector (bias broadcast)."""
    broadcast = _check_addsub_shapes(a, b)
    value = a.data + b.data

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                if broadcast:
                    b._accum(g.reshape(-1, b.shape[0]).sum(axis=0))
                else:
                    b._accum(g)
        return bw

    return _result(value, (a, b), make)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference; b may be a trailing-axis vector."""
    broadcast = _check_addsub_shapes(a, b)
    value = a.data - b.data

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                if broadcast:
                    b._accum(-g.reshape(-1, b.shape[0]).sum(axis=0))
                else:
                    b._accum(-g)
        return bw

    return _result(value, (a, b), make)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"multiply requires equal shapes: {a.shape} vs {b.shape}")
    value = a.data * b.data

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g * b.data)
            if b.requires_grad:
                b._accum(g * a.data)
        return bw

    return _result(value, (a, b), make)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    s = float(s)
    value = a.data * s

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g * s)
        return bw

    return _result(value, (a,), make)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    value = x * cdf

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
                a._accum(g * (cdf + x * pdf))
        return bw

    return _result(value, (a,), make)


def embedding_lookup(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table; the gradient scatter-adds into the table.

    Also serves as a row-gather for hidden-state matrices.
    """
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup expects a 2-D table, got {table.shape}")
    idx = np.asarray(list(indices), dtype=np.intp)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"index out of range for table with {n_rows} rows: {idx}")
    value = table.data[idx]

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if table.requires_grad:
                if table.grad is None:
                    table.grad = np.zeros_like(table.data)
                np.add.at(table.grad, idx, g)
        return bw

    return _result(value, (table,), make)


def transpose(a: Tensor) -> Tensor:
    """Transpose of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    value = a.data.T.copy()

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g.T)
        return bw

    return _result(value, (a,), make)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    value = a.data.reshape(shape).copy()

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g.reshape(a.shape))
        return bw

    return _result(value, (a,), make)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; the gradient splits back by the input sizes."""
    if not tensors:
        raise ShapeError("concat of zero tensors")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accum(g[tuple(sl)])
        return bw

    return _result(value, tuple(tensors), make)


def slice_ranges(a: Tensor, *ranges: Optional[tuple[int, int]]) -> Tensor:
    """Slice by (start, stop) ranges over the leading axes; None keeps an axis.

    The gradient zero-pads back to the input shape.
    """
    if len(ranges) > a.data.ndim:
        raise ShapeError(f"{len(ranges)} ranges for tensor of rank {a.data.ndim}")
    sl = tuple(slice(r[0], r[1]) if r is not None else slice(None) for r in ranges)
    value = a.data[sl].copy()

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                a.grad[sl] += g
        return bw

    return _result(value, (a,), make)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    value = np.array(a.data.sum())

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(np.full_like(a.data, g.reshape(-1)[0]))
        return bw

    return _result(value, (a,), make)


def mean_all(a: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    n = a.data.size
    value = np.array(a.data.mean())

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(np.full_like(a.data, g.reshape(-1)[0] / n))
        return bw

    return _result(value, (a,), make)


def l2_normalize(a: Tensor) -> Tensor:
    """Normalize each trailing-axis slice to unit L2 norm."""
    x = a.data
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms < 1e-30):
        raise DegenerateEmbeddingError("l2_normalize on a zero-norm slice")
    y = x / norms

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                dot = (g * y).sum(axis=-1, keepdims=True)
                a._accum((g - y * dot) / norms)
        return bw

    return _result(y, (a,), make)


def masked_softmax(logits: Tensor, additive_mask: Tensor) -> Tensor:
    """Softmax over the trailing axis after adding a 0/-1e9 mask.

    Mask entries must be exactly 0 (allowed) or <= -1e8 (forbidden). A slice
    with every position forbidden raises DegenerateRowError instead of
    silently producing NaN. Forbidden positions receive exactly zero
    probability because exp underflows after max-subtraction.
    """
    if logits.shape != additive_mask.shape:
        raise ShapeError(
            f"mask shape {additive_mask.shape} != logits shape {logits.shape}")
    m = additive_mask.data
    bad = (m > FORBIDDEN_CUTOFF) & (m != 0.0)
    if np.any(bad):
        raise ValueError("mask entries must be 0 or <= -1e8")
    forbidden = m <= FORBIDDEN_CUTOFF
    if np.any(forbidden.all(axis=-1)):
        rows = np.argwhere(forbidden.all(axis=-1))
        raise DegenerateRowError(f"softmax slice(s) with all positions forbidden: {rows[0]}")
    z = logits.data + m
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if logits.requires_grad:
                dot = (g * s).sum(axis=-1, keepdims=True)
                logits._accum(s * (g - dot))
        return bw

    return _result(s, (logits, additive_mask), make)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the trailing axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    value = gain.data * xhat + bias.data

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            lead = tuple(range(g.ndim - 1))
            if gain.requires_grad:
                gain._accum((g * xhat).sum(axis=lead))
            if bias.requires_grad:
                bias._accum(g.sum(axis=lead))
            if x.requires_grad:
                gx = g * gain.data
                term = gx - gx.mean(axis=-1, keepdims=True) \
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                x._accum(term * inv_std)
        return bw

    return _result(value, (x, gain, bias), make)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_from_logits(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[target].

    Gradient is (softmax - onehot) / n_rows.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    n_rows, vocab = logits.shape
    tgt = np.asarray(list(targets), dtype=np.intp)
    if tgt.shape != (n_rows,):
        raise ShapeError(f"{n_rows} logit rows but {tgt.size} targets")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexError(f"target index out of range for vocab {vocab}")
    logp = _log_softmax(logits.data)
    value = np.array(-logp[np.arange(n_rows), tgt].mean())

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if logits.requires_grad:
                grad = np.exp(logp)
                grad[np.arange(n_rows), tgt] -= 1.0
                logits._accum(grad * (g.reshape(-1)[0] / n_rows))
        return bw

    return _result(value, (logits,), make)


def mse(pred: Tensor, truth: Tensor) -> Tensor:
    """Mean squared elementwise difference over all elements."""
    if pred.shape != truth.shape:
        raise ShapeError(f"mse requires equal shapes: {pred.shape} vs {truth.shape}")
    diff = pred.data - truth.data
    n = diff.size
    value = np.array((diff * diff).mean())

    def make(out: Tensor):
        def bw(g: np.ndarray) -> None:
            coeff = 2.0 * g.reshape(-1)[0] / n
            if pred.requires_grad:
                pred._accum(coeff * diff)
            if truth.requires_grad:
                truth._accum(-coeff * diff)
        return bw

    return _result(value, (pred, truth), make)
