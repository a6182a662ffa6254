"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tape records a Wengert list: nodes are appended in creation order, which is
also a valid topological order, so the backward pass is a single reverse scan.
Tapes are define-by-run and rebuilt for every optimization step; they are
confined to one execution context and never shared between threads.

Values are plain numpy float64 arrays. Finiteness is enforced where data
enters the tape (leaf/constant creation); loss values and returned gradients
are re-checked, so a NaN produced by op math cannot escape silently.
"""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError, PreconditionError, ShapeError

Array = np.ndarray


def as_tensor(x) -> Array:
    """Coerce to a float64 array, rejecting non-finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite tensor entries (shape {a.shape})")
    return a


class Node:
    """One recorded value plus the local gradients back to its parents."""

    __slots__ = ("tape", "idx", "value", "parents", "op")

    def __init__(self, tape: "Tape", idx: int, value: Array, parents, op: str):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.parents = parents  # tuple of (Node, vjp) pairs
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, idx={self.idx}, shape={self.value.shape})"

    # arithmetic sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return add(self, _lift(self.tape, other))

    def __radd__(self, other):
        return add(_lift(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _lift(self.tape, other))

    def __rmul__(self, other):
        return mul(_lift(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _lift(self.tape, other))

    def __rtruediv__(self, other):
        return div(_lift(self.tape, other), self)

    def __neg__(self):
        return neg(self)


class Tape:
    """Creation-ordered node list; owns everything recorded on it."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, value: Array, parents, op: str) -> Node:
        node = Node(self, len(self.nodes), value, parents, op)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        return self._record(as_tensor(value), (), "leaf")

    def constant(self, value) -> Node:
        return self._record(as_tensor(value), (), "const")


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise PreconditionError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _pair_shapes(a: Node, b: Node, op: str):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: incompatible shapes {a.value.shape} and {b.value.shape}"
        ) from None


def _unbroadcast(grad: Array, shape) -> Array:
    """Reduce a broadcast output gradient back to the operand's shape."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(ax for ax, s in enumerate(shape) if s == 1 and grad.shape[ax] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Node, b: Node) -> Node:
    _pair_shapes(a, b, "add")
    out = a.value + b.value
    t = a.tape
    return t._record(
        out,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
        "add",
    )


def sub(a: Node, b: Node) -> Node:
    _pair_shapes(a, b, "sub")
    out = a.value - b.value
    return a.tape._record(
        out,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
        "sub",
    )


def mul(a: Node, b: Node) -> Node:
    _pair_shapes(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape._record(
        av * bv,
        (
            (a, lambda g: _unbroadcast(g * bv, av.shape)),
            (b, lambda g: _unbroadcast(g * av, bv.shape)),
        ),
        "mul",
    )


def div(a: Node, b: Node) -> Node:
    _pair_shapes(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return a.tape._record(
        out,
        (
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
        ),
        "div",
    )


def neg(a: Node) -> Node:
    return a.tape._record(-a.value, ((a, lambda g: -g),), "neg")


def scale(a: Node, c: float) -> Node:
    """Multiply by a plain (non-differentiated) scalar."""
    c = float(c)
    return a.tape._record(a.value * c, ((a, lambda g: g * c),), "scale")


def matmul(a: Node, b: Node) -> Node:
    """Matrix-matrix (2d @ 2d) or matrix-vector (2d @ 1d) product."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
    out = av @ bv
    if bv.ndim == 1:
        parents = (
            (a, lambda g: np.outer(g, bv)),
            (b, lambda g: av.T @ g),
        )
    else:
        parents = (
            (a, lambda g: g @ bv.T),
            (b, lambda g: av.T @ g),
        )
    return a.tape._record(out, parents, "matmul")


def dot(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise ShapeError(f"dot: got {av.shape} . {bv.shape}")
    return a.tape._record(
        np.dot(av, bv),
        ((a, lambda g: g * bv), (b, lambda g: g * av)),
        "dot",
    )


def sigmoid(a: Node) -> Node:
    y = expit(a.value)
    return a.tape._record(y, ((a, lambda g: g * y * (1.0 - y)),), "sigmoid")


# the smooth range squash onto (0,1); kept as its own named op because the
# renderer's output contract depends on it
squash = sigmoid


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape._record(y, ((a, lambda g: g * (1.0 - y * y)),), "tanh")


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    return a.tape._record(y, ((a, lambda g: g * y),), "exp")


def log(a: Node) -> Node:
    return a.tape._record(
        np.log(a.value), ((a, lambda g: g / a.value),), "log"
    )


def sqrt(a: Node) -> Node:
    y = np.sqrt(a.value)
    return a.tape._record(y, ((a, lambda g: g / (2.0 * y)),), "sqrt")


def softplus(a: Node) -> Node:
    y = np.logaddexp(0.0, a.value)
    return a.tape._record(y, ((a, lambda g: g * expit(a.value)),), "softplus")


def softmax(a: Node, temperature: float = 1.0) -> Node:
    """Softmax of a 1-d vector at the given temperature."""
    if a.value.ndim != 1:
        raise ShapeError(f"softmax: expected 1-d input, got {a.value.shape}")
    tau = float(temperature)
    if tau <= 0.0:
        raise PreconditionError("softmax temperature must be positive")
    z = a.value / tau
    z = z - np.max(z)
    e = np.exp(z)
    y = e / np.sum(e)

    def vjp(g):
        return (y * (g - np.dot(y, g))) / tau

    return a.tape._record(y, ((a, vjp),), "softmax")


def logsumexp(a: Node) -> Node:
    """log(sum(exp(x))) of a 1-d vector; gradient is softmax(x)."""
    if a.value.ndim != 1:
        raise ShapeError(f"logsumexp: expected 1-d input, got {a.value.shape}")
    m = np.max(a.value)
    e = np.exp(a.value - m)
    s = np.sum(e)
    out = m + np.log(s)
    sm = e / s
    return a.tape._record(np.asarray(out), ((a, lambda g: g * sm),), "logsumexp")


def sum_all(a: Node) -> Node:
    shp = a.value.shape
    return a.tape._record(
        np.asarray(np.sum(a.value)),
        ((a, lambda g: np.broadcast_to(g, shp).copy()),),
        "sum",
    )


def mean_all(a: Node) -> Node:
    n = a.value.size
    shp = a.value.shape
    return a.tape._record(
        np.asarray(np.mean(a.value)),
        ((a, lambda g: np.broadcast_to(g / n, shp).copy()),),
        "mean",
    )


def windowed_mean(a: Node, window: int) -> Node:
    """Mean over every window x window patch of a 2-d array (stride 1, valid)."""
    av = a.value
    if av.ndim != 2:
        raise ShapeError(f"windowed_mean: expected 2-d input, got {av.shape}")
    k = int(window)
    h, w = av.shape
    if k < 1 or k > h or k > w:
        raise ShapeError(f"windowed_mean: window {k} does not fit {av.shape}")
    patches = np.lib.stride_tricks.sliding_window_view(av, (k, k))
    out = patches.mean(axis=(-1, -2))
    oh, ow = out.shape
    inv = 1.0 / (k * k)

    def vjp(g):
        acc = np.zeros((h, w))
        gs = g * inv
        for di in range(k):
            for dj in range(k):
                acc[di : di + oh, dj : dj + ow] += gs
        return acc

    return a.tape._record(out, ((a, vjp),), "windowed_mean")


def windowed_covariance(a: Node, b: Node, window: int) -> Node:
    """Windowed covariance E[ab] - E[a]E[b] per patch, composed from means."""
    if a.value.shape != b.value.shape:
        raise ShapeError(
            f"windowed_covariance: shapes differ, {a.value.shape} vs {b.value.shape}"
        )
    return sub(
        windowed_mean(mul(a, b), window),
        mul(windowed_mean(a, window), windowed_mean(b, window)),
    )


def concat(parts: Sequence[Node]) -> Node:
    parts = list(parts)
    if not parts:
        raise PreconditionError("concat: no operands")
    for p in parts:
        if p.value.ndim != 1:
            raise ShapeError(f"concat: expected 1-d parts, got {p.value.shape}")
    sizes = [p.value.size for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[lo:hi]

    parent_specs = tuple((p, make_vjp(i)) for i, p in enumerate(parts))
    return parts[0].tape._record(out, parent_specs, "concat")


def take(a: Node, indices) -> Node:
    """Gather entries of a 1-d vector at the given indices."""
    if a.value.ndim != 1:
        raise ShapeError(f"take: expected 1-d input, got {a.value.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    n = a.value.shape[0]

    def vjp(g):
        z = np.zeros(n)
        np.add.at(z, idx, g)
        return z

    return a.tape._record(a.value[idx], ((a, vjp),), "take")


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    old = a.value.shape
    return a.tape._record(
        a.value.reshape(shape), ((a, lambda g: g.reshape(old)),), "reshape"
    )


def backward(loss: Node, leaves: Sequence[Node]) -> Dict[Node, Array]:
    """Chain-rule gradients of a scalar loss with respect to the given leaves.

    Leaves unreachable from the loss get an exact zero tensor. The scan order
    is the fixed reverse creation order, so replaying the same tape is
    bit-identical.
    """
    if loss.value.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise NonFiniteError("backward: loss value is non-finite")
    tape = loss.tape
    for leaf in leaves:
        if leaf.tape is not tape:
            raise PreconditionError("backward: leaf not recorded on the loss tape")

    grads: list = [None] * (loss.idx + 1)
    grads[loss.idx] = np.ones(())
    nodes = tape.nodes
    for i in range(loss.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        for parent, vjp in nodes[i].parents:
            pg = vjp(g)
            if grads[parent.idx] is None:
                grads[parent.idx] = pg
            else:
                grads[parent.idx] = grads[parent.idx] + pg

    out: Dict[Node, Array] = {}
    for leaf in leaves:
        g = grads[leaf.idx] if leaf.idx <= loss.idx else None
        if g is None:
            g = np.zeros_like(leaf.value)
        else:
            g = np.asarray(g, dtype=np.float64).reshape(leaf.value.shape)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("backward: non-finite gradient")
        out[leaf] = g
    return out


def finite_difference_check(
    f: Callable[[Array], float],
    point: Array,
    h: float,
    analytic: Array,
) -> float:
    """Max relative error of an analytic gradient against central differences.

    Returns max_i |g_an,i - g_fd,i| / max(1, |g_fd,i|). The probe function f
    is evaluated forward-only and must return finite scalars.
    """
    if h <= 0.0:
        raise PreconditionError("finite_difference_check: h must be positive")
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeError(
            f"finite_difference_check: gradient shape {analytic.shape} "
            f"does not match point shape {point.shape}"
        )
    flat = point.ravel()
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        up = float(f((flat + e).reshape(point.shape)))
        dn = float(f((flat - e).reshape(point.shape)))
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise NonFiniteError("finite_difference_check: probe returned non-finite value")
        g_fd[i] = (up - dn) / (2.0 * h)
    g_an = analytic.ravel()
    denom = np.maximum(1.0, np.abs(g_fd))
    return float(np.max(np.abs(g_an - g_fd) / denom)) if flat.size else 0.0
