"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every quantity is a `Node` wrapping a numpy array. Forward ops build an
acyclic graph; `backward` on a scalar root accumulates gradients into every
reachable node. The op set is deliberately small: exactly what MLP encoders,
soft gating, and the routing regularizers need, plus a central
finite-difference harness (`finite_diff_check`) used as the gradient oracle
throughout the test suite.

Conventions:
  - float64 everywhere; gradient checking at 1e-4 is unreliable in 32-bit.
  - log and sqrt add 1e-12 inside the argument, row norms add 1e-8 inside
    the square root, so all of them stay finite at input 0.
  - softmax subtracts the row max before exponentiating; temperature-scaled
    logits of magnitude ~100 would overflow a naive implementation.
  - values are treated as immutable once wrapped; the optimizer rebinds
    `node.value` rather than mutating in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_EPS = 1e-12
SQRT_EPS = 1e-12
NORM_EPS = 1e-8


class ShapeMismatch(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(
            f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        )


class UnsupportedOp(ValueError):
    """Raised by `forward_op` for an unknown op kind."""


class NonScalarRoot(ValueError):
    """Raised when backward/finite_diff_check get a non-scalar objective."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One vertex of the computation graph.

    Leaf nodes (parameters, constants, detached values) have no parents and
    no backward rule. `grad` is populated by `backward` and accumulates
    additively until `zero_grad` resets it.
    """

    __slots__ = ("value", "parents", "op", "grad", "_backward")

    def __init__(self, value, parents=(), op="leaf", backward=None):
        self.value = _as_array(value)
        self.parents = tuple(parents)
        self.op = op
        self.grad = None
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def ndim(self):
        return self.value.ndim

    def detach(self) -> "Node":
        """A leaf carrying the same value; gradients stop here."""
        return Node(self.value, op="detach")

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return scalar_multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, op="const")


def _accumulate(node: Node, g: np.ndarray):
    # rebind, never mutate: upstream grads may be aliased elsewhere
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Node, b: Node):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)
    out = Node(a.value + b.value, (a, b), "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = bw
    return out


def subtract(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("subtract", a, b)
    out = Node(a.value - b.value, (a, b), "subtract")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out._backward = bw
    return out


def multiply(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("multiply", a, b)
    out = Node(a.value * b.value, (a, b), "multiply")

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    out._backward = bw
    return out


def divide(a, b) -> Node:
    """Elementwise a / b. Callers are responsible for guarding denominators;
    every denominator in this package comes out of an epsilon-guarded norm."""
    a, b = as_node(a), as_node(b)
    _check_broadcast("divide", a, b)
    out = Node(a.value / b.value, (a, b), "divide")

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.value, a.shape))
        _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    out._backward = bw
    return out


def scalar_multiply(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    out = Node(a.value * c, (a,), "scalar_multiply")

    def bw(g):
        _accumulate(a, g * c)

    out._backward = bw
    return out


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = Node(a.value @ b.value, (a, b), "matmul")

    def bw(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    out._backward = bw
    return out


def transpose(a) -> Node:
    a = as_node(a)
    if a.ndim != 2:
        raise ShapeMismatch("transpose", a.shape)
    out = Node(a.value.T, (a,), "transpose")

    def bw(g):
        _accumulate(a, g.T)

    out._backward = bw
    return out


def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch("reshape", a.shape, shape)
    out = Node(a.value.reshape(shape), (a,), "reshape")

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    out._backward = bw
    return out


def concatenate(nodes, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeMismatch("concatenate", *[n.shape for n in nodes]) from None
    out = Node(value, tuple(nodes), "concatenate")
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for node, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(node, g[tuple(index)])

    out._backward = bw
    return out


def narrow(a, index) -> Node:
    """Basic slicing. `index` is a slice or tuple of slices."""
    a = as_node(a)
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not isinstance(part, slice):
            raise UnsupportedOp("narrow supports slice indices only")
    out = Node(a.value[index], (a,), "slice")

    def bw(g):
        full = np.zeros(a.shape)
        full[index] = g
        _accumulate(a, full)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------

def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    out = Node(t, (a,), "tanh")

    def bw(g):
        _accumulate(a, g * (1.0 - t * t))

    out._backward = bw
    return out


def relu(a) -> Node:
    a = as_node(a)
    out = Node(np.maximum(a.value, 0.0), (a,), "relu")

    def bw(g):
        _accumulate(a, g * (a.value > 0.0))

    out._backward = bw
    return out


def exp(a) -> Node:
    a = as_node(a)
    e = np.exp(a.value)
    out = Node(e, (a,), "exp")

    def bw(g):
        _accumulate(a, g * e)

    out._backward = bw
    return out


def log(a) -> Node:
    """Natural log of (x + 1e-12); finite at x = 0."""
    a = as_node(a)
    shifted = a.value + LOG_EPS
    out = Node(np.log(shifted), (a,), "log")

    def bw(g):
        _accumulate(a, g / shifted)

    out._backward = bw
    return out


def sqrt(a) -> Node:
    """Square root of (x + 1e-12); finite, with finite gradient, at x = 0."""
    a = as_node(a)
    root = np.sqrt(a.value + SQRT_EPS)
    out = Node(root, (a,), "sqrt")

    def bw(g):
        _accumulate(a, g * 0.5 / root)

    out._backward = bw
    return out


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    out = Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum")

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    out._backward = bw
    return out


def reduce_mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    out = Node(a.value.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    out._backward = bw
    return out


def row_norm(a, eps=NORM_EPS, keepdims=False) -> Node:
    """L2 norm over the last axis, computed as sqrt(sum(x^2) + eps)."""
    a = as_node(a)
    sq = (a.value * a.value).sum(axis=-1, keepdims=keepdims)
    norm = np.sqrt(sq + eps)
    out = Node(norm, (a,), "row_norm")

    def bw(g):
        g = np.asarray(g)
        n = norm
        if not keepdims:
            g = np.expand_dims(g, -1)
            n = np.expand_dims(norm, -1)
        _accumulate(a, g * a.value / n)

    out._backward = bw
    return out


def softmax(a) -> Node:
    """Softmax over the last axis with max-subtraction for stability."""
    a = as_node(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Node(p, (a,), "softmax")

    def bw(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(a, p * (g - inner))

    out._backward = bw
    return out


def conv2d_same(a, kernel) -> Node:
    """2D cross-correlation with a fixed (non-learned) odd-sized kernel.

    Zero padding, same-size output. `a` may be a single (R, C) map or a
    batch (B, R, C); the kernel is shared across the batch. Gradients flow
    into `a` only; the kernel is a plain constant array.
    """
    a = as_node(a)
    kernel = _as_array(kernel)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ShapeMismatch("conv2d", kernel.shape)
    if a.ndim not in (2, 3):
        raise ShapeMismatch("conv2d", a.shape, kernel.shape)

    def correlate(x, k):
        ph, pw = k.shape[0] // 2, k.shape[1] // 2
        pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
        padded = np.pad(x, pad)
        windows = np.lib.stride_tricks.sliding_window_view(padded, k.shape, axis=(-2, -1))
        return np.einsum("...ijkl,kl->...ij", windows, k)

    out = Node(correlate(a.value, kernel), (a,), "conv2d")
    flipped = kernel[::-1, ::-1]

    def bw(g):
        _accumulate(a, correlate(g, flipped))

    out._backward = bw
    return out


def mse(a, b) -> Node:
    """Mean squared error, mean over all entries."""
    diff = subtract(a, b)
    return reduce_mean(multiply(diff, diff))


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _toposort(root: Node):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


def backward(root: Node):
    """Accumulate d(root)/d(node) into `.grad` for every reachable node.

    The root must be scalar-valued. Gradients add across multiple uses of a
    node and across repeated backward calls; use `zero_grad` between steps.
    """
    if root.size != 1:
        raise NonScalarRoot(f"backward requires a scalar root, got shape {root.shape}")
    order = _toposort(root)
    _accumulate(root, np.ones(root.shape))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(nodes):
    for node in nodes:
        node.grad = None


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

OPS = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scalar_multiply": scalar_multiply,
    "divide": divide,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concatenate": concatenate,
    "slice": narrow,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "row_norm": row_norm,
    "softmax": softmax,
    "conv2d": conv2d_same,
}


def forward_op(kind: str, *args, **kwargs) -> Node:
    """Apply an op by name. Unknown kinds raise UnsupportedOp."""
    try:
        op = OPS[kind]
    except KeyError:
        raise UnsupportedOp(f"unknown op kind {kind!r}") from None
    return op(*args, **kwargs)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    """Outcome of checking analytic gradients against central differences."""

    step: float
    per_param: list
    max_rel_error: float

    def __str__(self):
        return f"GradReport(max_rel_error={self.max_rel_error:.3e}, step={self.step:g})"


def finite_diff_check(fn, params, step=1e-5) -> GradReport:
    """Compare analytic gradients of `fn()` against central differences.

    `fn` is a deterministic closure over `params` (a list of leaf Nodes)
    returning a scalar Node. Relative error per entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    loss = fn()
    if not isinstance(loss, Node) or loss.size != 1:
        raise NonScalarRoot("finite_diff_check requires fn to return a scalar Node")
    zero_grad(params)
    backward(loss)
    analytic = [
        np.zeros(p.shape) if p.grad is None else np.array(p.grad) for p in params
    ]

    per_param = []
    for p, a in zip(params, analytic):
        base = p.value
        numeric = np.zeros(p.shape)
        flat_numeric = numeric.reshape(-1)
        flat_base = base.reshape(-1)
        for i in range(base.size):
            for sign in (+1.0, -1.0):
                bumped = flat_base.copy()
                bumped[i] += sign * step
                p.value = bumped.reshape(base.shape)
                val = fn().item()
                flat_numeric[i] += sign * val / (2.0 * step)
        p.value = base
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        rel = np.abs(a - numeric) / denom
        per_param.append(float(rel.max()) if rel.size else 0.0)

    max_err = max(per_param) if per_param else 0.0
    return GradReport(step=step, per_param=per_param, max_rel_error=max_err)
