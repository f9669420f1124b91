"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` (entered with ``with``)
whenever at least one input is tracked by that tape. With no active tape the
same functions simply evaluate, which is the fast path used for prediction.

Shapes are never broadcast. Python scalars may be mixed into elementwise ops
and are expanded to the other operand's shape; arrays must match exactly.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericsError, ShapeError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    op: str
    inputs: tuple  # node ids, or None for untracked inputs
    vjp: Callable | None  # grad_out -> tuple of grads, one per input
    shape: tuple


class Tape:
    """Ordered record of primitive operations.

    Node ids are positions in ``nodes``; every node's inputs precede it, so the
    backward pass is a single walk in reverse id order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, str] = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, value, name=None) -> "Tensor":
        """Register a leaf (a trainable input) and return its tracked tensor."""
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(np.array(data, dtype=np.float64))
        t.tape = self
        t.node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t.data.shape))
        self.leaves[t.node] = name if name is not None else f"leaf{t.node}"
        return t

    def _id(self, t):
        return t.node if (isinstance(t, Tensor) and t.tape is self) else None

    def record(self, op, inputs, out, vjp) -> "Tensor":
        t = Tensor(out)
        t.tape = self
        t.node = len(self.nodes)
        self.nodes.append(_Node(op, tuple(self._id(x) for x in inputs), vjp, out.shape))
        return t


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.tape = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tracked}, data={self.data!r})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, inputs, out, vjp):
    """Finite-check ``out`` and record it if any input lives on the active tape."""
    # a finite sum implies finite entries; fall back to the full check otherwise
    if not math.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NumericsError(f"non-finite output from op '{op}'")
    tape = active_tape()
    if tape is not None and any(isinstance(x, Tensor) and x.tape is tape for x in inputs):
        return tape.record(op, inputs, out, vjp)
    return Tensor(out)


def _is_scalar(x):
    return isinstance(x, (int, float, np.floating, np.integer))


def _pair(a, b, op):
    if _is_scalar(a) and _is_scalar(b):
        raise ShapeError(f"{op}: at least one operand must be a tensor")
    if _is_scalar(a):
        b = as_tensor(b)
        a = Tensor(np.full(b.shape, float(a)))
    elif _is_scalar(b):
        a = as_tensor(a)
        b = Tensor(np.full(a.shape, float(b)))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    a, b = _pair(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    a, b = _pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = _pair(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise DomainError("div: zero denominator")
    return _emit("div", (a, b), ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a, c: float):
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _emit("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0.0):
        raise DomainError("log of a nonpositive value")
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def cos(a):
    a = as_tensor(a)
    ad = a.data
    return _emit("cos", (a,), np.cos(ad), lambda g: (-g * np.sin(ad),))


def sin(a):
    a = as_tensor(a)
    ad = a.data
    return _emit("sin", (a,), np.sin(ad), lambda g: (g * np.cos(ad),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    return _emit("softplus", (a,), _softplus(ad), lambda g: (g * _sigmoid(ad),))


def identity(a):
    return as_tensor(a)


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (a,), np.asarray(out, dtype=np.float64), vjp)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(sum_(a, axis), 1.0 / n)


# ---------------------------------------------------------------- structural

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or (ad.ndim == 1 and bd.ndim == 1):
        raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {ad.shape} @ {bd.shape}")

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # matrix @ vector
            return np.outer(g, bd), ad.T @ g
        return bd @ g, np.outer(ad, g)  # vector @ matrix

    return _emit("matmul", (a, b), ad @ bd, vjp)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape).copy(), lambda g: (g.reshape(old),))


def concat(items: Sequence, axis=0):
    items = [as_tensor(x) for x in items]
    if not items:
        raise ShapeError("concat of nothing")
    ref = items[0].shape
    for x in items[1:]:
        if len(x.shape) != len(ref) or any(
            x.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[axis] for x in items]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in items], axis=axis)
    return _emit("concat", tuple(items), out, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(a, start: int, stop: int, axis=0):
    a = as_tensor(a)
    key = [slice(None)] * a.data.ndim
    key[axis] = slice(start, stop)
    return index(a, tuple(key))


def index(a, key):
    """Basic or integer-array indexing; the gradient scatters back with ``np.add.at``."""
    a = as_tensor(a)
    shape = a.shape
    out = np.array(a.data[key], dtype=np.float64)

    basic = isinstance(key, (slice, int)) or (
        isinstance(key, tuple) and all(isinstance(k, (slice, int)) for k in key)
    )

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _emit("index", (a,), out, vjp)


def gather(a, idx):
    return index(a, np.asarray(idx, dtype=np.intp))


def tile_rows(a, n: int):
    """Explicitly repeat a vector into an ``(n, k)`` matrix."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError("tile_rows expects a vector")
    out = np.tile(a.data, (n, 1))
    return _emit("tile_rows", (a,), out, lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------- losses

def log_softmax(logits):
    z = as_tensor(logits)
    if z.data.ndim != 2:
        raise ShapeError("log_softmax expects (batch, classes)")
    zd = z.data
    m = zd.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(zd - m).sum(axis=1, keepdims=True))
    out = zd - lse
    p = np.exp(out)
    return _emit("log_softmax", (z,), out, lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits, labels):
    """Per-example negative log-likelihood of integer ``labels``; shape (batch,)."""
    z = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if z.data.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    zd = z.data
    m = zd.max(axis=1, keepdims=True)
    e = np.exp(zd - m)
    s = e.sum(axis=1, keepdims=True)
    logp = zd - m - np.log(s)
    rows = np.arange(len(labels))
    out = -logp[rows, labels]
    p = e / s

    def vjp(g):
        grad = p * g[:, None]
        grad[rows, labels] -= g
        return (grad,)

    return _emit("cross_entropy", (z,), out, vjp)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "scale": scale,
    "sum": sum_,
    "mean": mean,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "slice": slice_,
    "index": index,
    "gather": gather,
    "reshape": reshape,
    "transpose": transpose,
    "tile_rows": tile_rows,
    "softplus": softplus,
    "tanh": tanh,
    "cos": cos,
    "sin": sin,
    "exp": exp,
    "log": log,
    "square": square,
    "log_softmax": log_softmax,
    "cross_entropy": cross_entropy,
}


def forward_op(name: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("matmul", [A, v])``."""
    try:
        fn = OPS[name]
    except KeyError:
        raise ContractError(f"unknown op '{name}'") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from ``loss``. Returns node id -> gradient, with every leaf present."""
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise ContractError("loss is not recorded on this tape")
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    nodes = tape.nodes
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        node = nodes[nid]
        if g is None or node.vjp is None:
            continue
        local = node.vjp(g)
        for inp, gi in zip(node.inputs, local):
            if inp is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = np.asarray(gi, dtype=np.float64)
    for leaf in tape.leaves:
        if leaf not in grads:
            grads[leaf] = np.zeros(nodes[leaf].shape)
    return grads


def grad(tape: Tape, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    g = backward(tape, loss)
    return [g[t.node] for t in wrt]


# ---------------------------------------------------------------- checking

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    rtol: float
    floor: float
    value: float = field(default=0.0)

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.rtol


def relative_error(analytic, numeric, floor=1e-8):
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def grad_check(f, params, step=1e-5, rtol=1e-4, floor=1e-8) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` with central differences.

    ``floor`` bounds the denominator of the relative error so that entries whose
    true derivative is ~0 are judged on absolute error instead.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x0 = np.array(params.data if isinstance(params, Tensor) else params, dtype=np.float64)
    with Tape() as tape:
        x = tape.watch(x0, "params")
        y = f(x)
        if not isinstance(y, Tensor) or y.tape is not tape:
            analytic = np.zeros_like(x0)
            value = float(as_tensor(y).data)
        else:
            analytic = backward(tape, y)[x.node]
            value = float(y.data)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = float(as_tensor(f(Tensor(xp.reshape(x0.shape)))).data)
        fm = float(as_tensor(f(Tensor(xm.reshape(x0.shape)))).data)
        flat[i] = (fp - fm) / (2.0 * step)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric, floor), rtol, floor, value)
