"""Dense tensors with reverse-mode differentiation over an explicit tape.

A :class:`Tape` is opened per forward pass::

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), labels)
    grads = tape.backward(loss)

Operations executed while a tape is active, on at least one input that
requires a gradient, are recorded together with a closure computing their
local vector-Jacobian product.  Without an active tape the same functions are
plain numpy evaluations, which is how inference runs.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf from finite inputs."""


class Tensor:
    """Dense real array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("out_id", "inputs", "vjp")

    def __init__(self, out_id: int, inputs: tuple, vjp: Callable):
        self.out_id = out_id
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended in execution order, so the record is topologically
    sorted by construction.  Tapes are bound to the thread that enters them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape exited out of order")
        stack.pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t.node_id not in self._produced:
                self.leaves.setdefault(t.node_id, t)
        self.nodes.append(_Node(out.node_id, tuple(inputs), vjp))
        self._produced.add(out.node_id)

    def backward(self, root: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict[int, Tensor]:
        """Gradient of the scalar ``root`` for every leaf seen by this tape.

        Leaves listed in ``wrt`` but never reached get an all-zero gradient.
        Returns a map from leaf ``node_id`` to gradient tensor.
        """
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        leaves = dict(self.leaves)
        for t in wrt or ():
            leaves.setdefault(t.node_id, t)
        if root.node_id not in self._produced and root.node_id not in leaves:
            raise ValueError("root tensor was not computed on this tape")

        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.out_id)
            if g is None:
                continue
            if node.out_id not in leaves:
                del grads[node.out_id]
            local = node.vjp(g)
            for inp, gi in zip(node.inputs, local):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi

        out = {}
        for nid, leaf in leaves.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(leaf.data)
            out[nid] = Tensor(np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape))
        return out

    def grad(self, root: Tensor, *tensors: Tensor) -> list[Tensor]:
        """Convenience wrapper: gradients of ``root`` for the given leaves, in order."""
        g = self.backward(root, wrt=tensors)
        return [g[t.node_id] for t in tensors]


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, check: bool = True) -> Tensor:
    if check and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite values produced by a forward operation")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, inputs, vjp)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _result(np.where(keep, a.data, 0).astype(a.dtype), (a,), lambda g: (g * keep,))


def square(a) -> Tensor:
    return mul(a, a)


# ------------------------------------------------------------------ reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(ad @ bd, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), check=False)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), check=False)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no tensors given")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, vjp, check=False)


def concat_rows(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=-2)


def concat_cols(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=-1)


def take_row(a, index: int) -> Tensor:
    """Row ``index`` of the trailing ``l x d`` block: ``[..., l, d] -> [..., d]``."""
    a = as_tensor(a)
    src_shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[..., index, :] = g
        return (full,)

    return _result(a.data[..., index, :].copy(), (a,), vjp, check=False)


# ------------------------------------------------------------ network pieces


def softmax_rows(x, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get zero
    weight (equivalent to a score of -inf).  Every row must keep at least one
    entry.
    """
    x = as_tensor(x)
    z = x.data.astype(np.float64)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(x.dtype)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64)
        return ((y * (g - inner)).astype(x.dtype),)

    return _result(y, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise each row of the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.astype(np.float64)
    out = (xhat * gd + bias.data).astype(x.dtype)

    def vjp(g):
        g64 = g.astype(np.float64)
        red = tuple(range(g.ndim - 1))
        dgain = (g64 * xhat).sum(axis=red)
        dbias = g64.sum(axis=red)
        dxhat = g64 * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(x.dtype), dgain.astype(gain.dtype), dbias.astype(bias.dtype)

    return _result(out, (x, gain, bias), vjp)


def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` selected by integer ``ids``: ``ids.shape + (d,)``."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), vjp, check=False)


def max_pool_rows(x, row_mask: Optional[np.ndarray] = None) -> Tensor:
    """Elementwise max over the row axis: ``[..., l, d] -> [..., d]``.

    ``row_mask`` (shape ``[..., l]``) excludes False rows.  Gradient goes to
    the first maximising row.
    """
    x = as_tensor(x)
    xd = x.data
    if row_mask is not None:
        row_mask = np.asarray(row_mask, dtype=bool)
        if not row_mask.any(axis=-1).all():
            raise ValueError("max_pool_rows: a sequence has no valid rows")
        xd = np.where(row_mask[..., None], xd, -np.inf)
    idx = xd.argmax(axis=-2)
    out = np.take_along_axis(xd, idx[..., None, :], axis=-2)[..., 0, :].astype(x.dtype)

    def vjp(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(full, idx[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return _result(out, (x,), vjp)


def mean_pool_rows(x, row_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over the (valid) rows: ``[..., l, d] -> [..., d]``."""
    x = as_tensor(x)
    if row_mask is None:
        row_mask = np.ones(x.shape[:-1], dtype=bool)
    w = np.asarray(row_mask, dtype=np.float64)
    counts = w.sum(axis=-1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("mean_pool_rows: a sequence has no valid rows")
    w = (w / counts).astype(x.dtype)[..., None]

    def vjp(g):
        return ((g[..., None, :] * w).astype(x.dtype),)

    out = (x.data * w).sum(axis=-2, dtype=np.float64).astype(x.dtype)
    return _result(out, (x,), vjp)


def cross_entropy(logits, labels, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``.

    ``logits`` has shape ``labels.shape + (c,)``.  Optional 0/1 ``weights``
    (same shape as ``labels``) drop positions such as padding from the mean.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    z = logits.data.reshape(-1, c).astype(np.float64)
    lab = labels.reshape(-1)
    w = np.ones(lab.shape) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no positions to average over")
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(lab.size), lab]
    loss = np.asarray((nll * w).sum() / total, dtype=logits.dtype)

    def vjp(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(lab.size), lab] -= 1.0
        p *= (w / total)[:, None] * float(g)
        return (p.reshape(logits.shape).astype(logits.dtype),)

    return _result(loss, (logits,), vjp)
