"""Minimal reverse-mode differentiation over float64 numpy arrays.

Graphs are define-by-run: every operation on a :class:`Tensor` records its
parents and a closure mapping the output gradient to parent gradients. Node
ids come from a global counter, so sorting by id is a topological order.

A :class:`Graph` wraps a builder function ``fn(params, inputs) -> Tensor``
together with named parameter arrays; :func:`forward`, :func:`backward` and
:func:`grad_check` operate on it.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import ctc as _ctc

LOG_FLOOR = 1e-12

_ids = itertools.count()


class ShapeError(ValueError):
    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id: int, op: str):
        super().__init__(f"node {node_id} ({op}) produced a non-finite value")
        self.node_id = node_id
        self.op = op


class GraphStateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "id", "name")
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(id={self.id}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.id = next(_ids)
    out.op = op
    out.name = None
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(out.id, op)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.parents = ()
        out.backward_fn = None
    return out


def _next_id() -> int:
    # reserves an id for the node that failed to build
    return next(_ids)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(_next_id(), f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    """Natural log with arguments floored at ``LOG_FLOOR``; no gradient below the floor."""
    x = as_tensor(x)
    floored = x.data < LOG_FLOOR
    safe = np.where(floored, LOG_FLOOR, x.data)
    return _node(np.log(safe), (x,), lambda g: (np.where(floored, 0.0, g / safe),), "log")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = _ctc.log_softmax(x.data, axis=axis)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), backward, "log_softmax")


# ------------------------------------------------------------------ structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(_next_id(), "matmul: scalar operand")
    ad = a.data[None, :] if a.ndim == 1 else a.data
    bd = b.data[:, None] if b.ndim == 1 else b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(_next_id(), f"matmul: inner dimensions {a.shape} @ {b.shape}")
    out = ad @ bd

    def backward(g):
        g = g.reshape(out.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        ga = _unbroadcast(ga, ad.shape).reshape(a.shape)
        gb = _unbroadcast(gb, bd.shape).reshape(b.shape)
        return ga, gb

    if a.ndim == 1:
        out_data = out[..., 0, :]
    else:
        out_data = out
    if b.ndim == 1:
        out_data = out_data[..., 0]
    return _node(out_data, (a, b), backward, "matmul")


def swap_last(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(_next_id(), f"reshape: {x.shape} -> {shape}") from None
    return _node(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(y, (x,), backward, "sum")


def tmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-wise maximum; the gradient flows to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _node(y, (x,), backward, "max")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(_next_id(), "concat: " + " ".join(str(x.shape) for x in xs)) from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(y, xs, backward, "concat")


def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(y, (x,), backward, "getitem")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer index array."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    y = table.data[index]

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(y, (table,), backward, "take_rows")


# ------------------------------------------------------------------ composites


def recurrence(pre: Tensor, w_h: Tensor, mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Elman recurrence ``h_t = tanh(pre_t + h_{t-1} @ w_h)`` over axis 1 of ``pre``.

    ``pre`` is (B, T, H) with the input projection already applied. Where
    ``mask[b, t] == 0`` the state is carried through unchanged, so padded
    frames at the tail of a sequence do not disturb the reverse direction.
    """
    pre, w_h = as_tensor(pre), as_tensor(w_h)
    n_batch, n_steps, hidden = pre.shape
    if w_h.shape != (hidden, hidden):
        raise ShapeError(_next_id(), f"recurrence: w_h {w_h.shape} does not match hidden size {hidden}")
    m = np.ones((n_batch, n_steps)) if mask is None else np.asarray(mask, dtype=np.float64)
    order = range(n_steps - 1, -1, -1) if reverse else range(n_steps)
    h = np.zeros((n_batch, n_steps, hidden))
    z = np.zeros((n_batch, n_steps, hidden))
    prev_of = {}
    state = np.zeros((n_batch, hidden))
    for t in order:
        prev_of[t] = state
        z[:, t] = np.tanh(pre.data[:, t] + state @ w_h.data)
        mt = m[:, t, None]
        state = mt * z[:, t] + (1.0 - mt) * state
        h[:, t] = state

    def backward(g):
        g_pre = np.zeros_like(pre.data)
        g_w = np.zeros_like(w_h.data)
        carry = np.zeros((n_batch, hidden))
        for t in reversed(list(order)):
            mt = m[:, t, None]
            dh = g[:, t] + carry
            da = dh * mt * (1.0 - z[:, t] ** 2)
            g_pre[:, t] = da
            g_w += prev_of[t].T @ da
            carry = da @ w_h.data.T + dh * (1.0 - mt)
        return g_pre, g_w

    return _node(h, (pre, w_h), backward, "recurrence")


def ctc_loss(logits: Tensor, targets: Sequence[Sequence[int]], lengths: Sequence[int] | None = None) -> Tensor:
    """Per-utterance CTC negative log-likelihoods, shape (B,), blank = last class."""
    logits = as_tensor(logits)
    losses, grads = _ctc.ctc_loss_batch(logits.data, targets, lengths)
    return _node(losses, (logits,), lambda g: (g[:, None, None] * grads,), "ctc")


# ----------------------------------------------------------------------- graph


def _topo(output: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    return [seen[k] for k in sorted(seen)]


def backprop(output: Tensor, seed: np.ndarray | float = 1.0) -> dict[int, np.ndarray]:
    """Gradients of ``output`` (contracted with ``seed``) for every node id reachable from it."""
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(output.id, f"seed shape {seed.shape} does not match output {output.shape}")
    grads: dict[int, np.ndarray] = {output.id: seed}
    for node in reversed(_topo(output)):
        g = grads.get(node.id)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return grads


class Graph:
    """A builder function plus the named parameters it is differentiated against."""

    def __init__(
        self,
        fn: Callable[[dict[str, Tensor], dict[str, Tensor]], Tensor],
        params: Mapping[str, np.ndarray] | None = None,
    ):
        self.fn = fn
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in (params or {}).items()}
        self._output: Tensor | None = None
        self._leaves: dict[str, Tensor] = {}

    def forward(self, inputs: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        self._leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}
        bound = {k: as_tensor(v) for k, v in (inputs or {}).items()}
        out = self.fn(self._leaves, bound)
        self._output = as_tensor(out)
        return self._output.data

    @property
    def output(self) -> Tensor:
        if self._output is None:
            raise GraphStateError("forward has not been run")
        return self._output

    def backward(self, seed: np.ndarray | float | None = None) -> dict[str, np.ndarray]:
        out = self.output
        if seed is None:
            seed = np.ones(out.shape)
        grads = backprop(out, seed)
        return {k: grads.get(leaf.id, np.zeros_like(leaf.data)) for k, leaf in self._leaves.items()}


def forward(graph: Graph, inputs: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    return graph.forward(inputs)


def backward(graph: Graph, seed: np.ndarray | float | None = None) -> dict[str, np.ndarray]:
    return graph.backward(seed)


def grad_check(
    graph: Graph,
    point: Mapping[str, np.ndarray] | None = None,
    step: float = 1e-5,
    inputs: Mapping[str, np.ndarray] | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Largest relative error between backward gradients and central differences.

    The error for one parameter is ``|g_a - g_n|_2 / max(|g_a|_2 + |g_n|_2, 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if point is not None:
        graph.params.update({k: np.array(v, dtype=np.float64) for k, v in point.items()})
    value = graph.forward(inputs)
    if value.size != 1:
        raise ValueError(f"grad_check needs a scalar output, got shape {value.shape}")
    analytic = graph.backward(np.ones(value.shape))
    worst = 0.0
    for name in names or list(graph.params):
        base = graph.params[name]
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(graph.forward(inputs).sum())
            flat[i] = orig - step
            down = float(graph.forward(inputs).sum())
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        diff = np.linalg.norm(analytic[name] - numeric)
        scale = max(np.linalg.norm(analytic[name]) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(diff / scale))
    graph.forward(inputs)
    return worst
