"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operators the reader needs are provided.  There is no general
broadcasting: binary element-wise ops require identical shapes, and the few
places that need a broadcast (bias rows, shared weight matrices in ``matmul``)
have dedicated operators.

Every :class:`Node` receives a creation index from a global counter.  The
backward pass collects every node reachable from the loss and replays local
backward rules in reverse creation order, which is a valid reverse topological
order because a node's parents always exist before it does.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "MaskError",
    "Node",
    "Tape",
    "constant",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "tanh",
    "sigmoid",
    "log",
    "elementwise",
    "add_bias",
    "softmax",
    "concat",
    "stack",
    "gather",
    "take",
    "max_over_time",
    "reshape",
    "transpose",
    "sum",
    "gru_cell",
    "backward",
]

_counter = itertools.count()


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class MaskError(ValueError):
    """A mask leaves nothing to normalise or pool over."""


class Node:
    """A value on the differentiation tape.

    ``grad`` is allocated lazily (as zeros of the value's shape) the first
    time a gradient flows into the node.  Gradients accumulate additively
    across fan-out; call :meth:`zero_grad` between steps.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "index", "_owned")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple[Node, ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._owned = False
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.index = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None
        self._owned = False

    def _accumulate(self, g) -> None:
        # incoming arrays may be shared with other nodes, so only a buffer
        # this node allocated itself is ever updated in place
        if isinstance(g, _SliceGrad):
            if not self._owned:
                self.grad = np.zeros(self.value.shape) if self.grad is None else np.array(self.grad)
                self._owned = True
            self.grad[g.key] += g.g
        elif self.grad is None:
            self.grad = g
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Node) -> Node:
        return add(self, other)

    def __sub__(self, other: Node) -> Node:
        return sub(self, other)

    def __mul__(self, other: Node) -> Node:
        return mul(self, other)

    def __truediv__(self, other: Node) -> Node:
        return div(self, other)

    def __matmul__(self, other: Node) -> Node:
        return matmul(self, other)


class _SliceGrad:
    """Gradient that is non-zero only on ``array[key]``."""

    __slots__ = ("key", "g")

    def __init__(self, key, g):
        self.key = key
        self.g = g


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64), requires_grad=False)


def parameter(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64), requires_grad=True)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _same_shape(name: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    """Matrix product.

    Supported layouts: ``[m,n] @ [n,p]``, ``[...,m,n] @ [n,p]`` (shared right
    operand) and ``[...,m,n] @ [...,n,p]`` with identical leading dims.
    """
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} have mismatched inner dims")
    shared = b.value.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} have mismatched batch dims")
    av, bv = a.value, b.value

    need_a, need_b = a.requires_grad, b.requires_grad

    def backward_fn(g):
        ga = gb = None
        if need_a:
            ga = g @ np.swapaxes(bv, -1, -2)
        if need_b:
            if shared:
                n, p = bv.shape
                gb = av.reshape(-1, n).T @ g.reshape(-1, p)
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return Node(av @ bv, (a, b), backward_fn)


def transpose(x: Node) -> Node:
    """Swap the last two axes."""
    return Node(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Node, shape: Sequence[int]) -> Node:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return Node(out, (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# element-wise
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("add", a, b)
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("sub", a, b)
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    need_a, need_b = a.requires_grad, b.requires_grad
    return Node(av * bv, (a, b), lambda g: (g * bv if need_a else None, g * av if need_b else None))


def div(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    return Node(av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return Node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Node) -> Node:
    # tanh form never overflows
    y = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
    return Node(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Node) -> Node:
    v = x.value
    return Node(np.log(v), (x,), lambda g: (g / v,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "tanh": tanh, "sigmoid": sigmoid, "log": log}


def elementwise(op: str, *args: Node) -> Node:
    """Dispatch an element-wise operator by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown element-wise op {op!r}") from None
    return fn(*args)


def add_bias(x: Node, b: Node) -> Node:
    """``x + b`` with ``b`` of shape ``[f]`` broadcast over every row of ``x[..., f]``."""
    if b.value.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} differ in the last axis")
    f = b.shape[0]
    return Node(x.value + b.value, (x, b), lambda g: (g, g.reshape(-1, f).sum(axis=0)))


# ---------------------------------------------------------------------------
# normalisation, structure, reduction
# ---------------------------------------------------------------------------


def softmax(logits: Node, mask: np.ndarray | None = None) -> Node:
    """Softmax over the last axis; masked (False) positions get exactly zero.

    ``mask`` must have the logits' shape.  Every row needs at least one
    unmasked entry.
    """
    v = logits.value
    if v.ndim == 0 or v.shape[-1] < 1:
        raise ShapeError(f"softmax: shape {logits.shape} has an empty last axis")
    if mask is None:
        m = np.ones(v.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != v.shape:
            raise ShapeError(f"softmax: mask shape {m.shape} differs from logits shape {v.shape}")
    if not m.any(axis=-1).all():
        raise MaskError("softmax: a row has every position masked")
    shifted = np.where(m, v, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Node(y, (logits,), backward_fn)


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    parts = [_as_node(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no parts")
    ndim = parts[0].value.ndim
    ax = axis % ndim
    for p in parts[1:]:
        s0, s1 = list(parts[0].shape), list(p.shape)
        if len(s1) != ndim or s0[:ax] + s0[ax + 1:] != s1[:ax] + s1[ax + 1:]:
            raise ShapeError(f"concat: shapes {parts[0].shape} and {p.shape} disagree off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.value for p in parts], axis=ax)
    return Node(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(parts: Sequence[Node], axis: int = 0) -> Node:
    parts = [_as_node(p) for p in parts]
    if not parts:
        raise ShapeError("stack: no parts")
    for p in parts[1:]:
        _same_shape("stack", parts[0], p)
    ax = axis % (parts[0].value.ndim + 1)
    out = np.stack([p.value for p in parts], axis=ax)
    n = len(parts)
    return Node(out, tuple(parts), lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


def take(x: Node, index: int, axis: int) -> Node:
    """Select one slice along ``axis`` (that axis is removed)."""
    ax = axis % x.value.ndim
    n = x.shape[ax]
    if not -n <= index < n:
        raise IndexError(f"take: index {index} out of range for axis of length {n}")
    key = (slice(None),) * ax + (index,)
    return Node(x.value[key], (x,), lambda g: (_SliceGrad(key, g),))


def gather(table: Node, ids) -> Node:
    """Rows of a ``[s, d]`` table; output shape is ``ids.shape + (d,)``.

    Repeated ids accumulate their gradients into the same row.
    """
    if table.value.ndim != 2:
        raise ShapeError(f"gather: table shape {table.shape} is not 2-d")
    ids = np.asarray(ids, dtype=np.int64)
    s = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= s):
        raise IndexError(f"gather: ids must lie in [0, {s}); got range [{ids.min()}, {ids.max()}]")
    shape = table.shape
    flat = ids.reshape(-1)

    def backward_fn(g):
        full = np.zeros(shape)
        np.add.at(full, flat, g.reshape(-1, shape[1]))
        return (full,)

    return Node(table.value[ids], (table,), backward_fn)


def max_over_time(seq: Node, mask: np.ndarray | None = None) -> Node:
    """Max over the second-to-last axis: ``[..., t, f] -> [..., f]``.

    The gradient goes only to the argmax position; ties resolve to the lowest
    index.  ``mask`` (shape ``[..., t]``) excludes positions from pooling.
    """
    v = seq.value
    if v.ndim < 2 or v.shape[-2] < 1:
        raise ShapeError(f"max_over_time: shape {seq.shape} needs a non-empty time axis")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != v.shape[:-1]:
            raise ShapeError(f"max_over_time: mask shape {m.shape} does not match {v.shape[:-1]}")
        if not m.any(axis=-1).all():
            raise MaskError("max_over_time: a sequence has every position masked")
        v = np.where(m[..., None], v, -np.inf)
    arg = np.argmax(v, axis=-2)
    out = np.take_along_axis(v, arg[..., None, :], axis=-2)[..., 0, :]
    shape = seq.shape

    def backward_fn(g):
        full = np.zeros(shape)
        np.put_along_axis(full, arg[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return Node(out, (seq,), backward_fn)


def sum(x: Node, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    shape = x.shape
    if axis is None:
        return Node(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, shape),))
    ax = axis % x.value.ndim
    return Node(x.value.sum(axis=ax), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape),))


def gru_cell(
    proj: Sequence[Node], t: int, h: Node, U: Sequence[Node], keep: np.ndarray | None = None
) -> Node:
    """One fused GRU step.

    ``proj`` holds the three input projections ``[B, T, H]`` (update, reset,
    candidate; biases included) and step ``t`` is read from each.  ``U`` holds
    the matching ``[H, H]`` recurrent matrices.  With ``keep`` (bool ``[B]``),
    rows where it is False return ``h`` unchanged.

        z = sigmoid(xz + h Uz);  r = sigmoid(xr + h Ur)
        n = tanh(xn + (r * h) Un);  h' = z * h + (1 - z) * n
    """
    pz, pr, pn = proj
    Uz, Ur, Un = U
    hv = h.value
    if pz.value.ndim != 3 or hv.shape != (pz.shape[0], pz.shape[2]):
        raise ShapeError(f"gru_cell: projection {pz.shape} does not match state {h.shape}")
    for node in (pr, pn):
        _same_shape("gru_cell", pz, node)
    for node in U:
        if node.shape != (hv.shape[1], hv.shape[1]):
            raise ShapeError(f"gru_cell: recurrent matrix {node.shape} does not match state {h.shape}")
    uz, ur, un = Uz.value, Ur.value, Un.value
    z = 0.5 * (np.tanh(0.5 * (pz.value[:, t] + hv @ uz)) + 1.0)
    r = 0.5 * (np.tanh(0.5 * (pr.value[:, t] + hv @ ur)) + 1.0)
    rh = r * hv
    n = np.tanh(pn.value[:, t] + rh @ un)
    out = n + z * (hv - n)
    k = None
    if keep is not None and not np.all(keep):
        k = np.asarray(keep, dtype=bool)[:, None]
        out = np.where(k, out, hv)
    key = (slice(None), t)

    def backward_fn(g):
        gk = g if k is None else np.where(k, g, 0.0)
        dz = gk * (hv - n)
        dan = gk * (1.0 - z) * (1.0 - n * n)
        drh = dan @ un.T
        dar = drh * hv * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dh = gk * z + drh * r + dar @ ur.T + daz @ uz.T
        if k is not None:
            dh = dh + np.where(k, 0.0, g)
        return (
            _SliceGrad(key, daz),
            _SliceGrad(key, dar),
            _SliceGrad(key, dan),
            dh,
            hv.T @ daz,
            hv.T @ dar,
            rh.T @ dan,
        )

    return Node(out, (pz, pr, pn, h, Uz, Ur, Un), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


class Tape:
    """Nodes reachable from a root, in creation order."""

    def __init__(self, root: Node):
        seen: dict[int, Node] = {}
        stack_ = [root]
        while stack_:
            node = stack_.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            stack_.extend(node.parents)
        self.nodes = sorted(seen.values(), key=lambda n: n.index)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Node) -> Tape:
    """Populate ``grad`` on every node reachable from a scalar ``loss``."""
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = Tape(loss)
    loss._accumulate(np.ones(loss.shape))
    for node in reversed(tape.nodes):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is not None and parent.requires_grad:
                parent._accumulate(g)
    return tape


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()
