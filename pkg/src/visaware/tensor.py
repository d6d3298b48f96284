"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation builds its output with :func:`make_op`, which
records the parent tensors and a backward rule mapping the output gradient to
one gradient per parent. :func:`backward` walks the recorded graph in reverse
topological order and accumulates into ``.grad`` of leaf tensors created with
``requires_grad=True``.

Broadcasting is restricted to leading axes: two operands are compatible when
their shapes are equal or one shape is a suffix of the other.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NormalizationError, NumericError

DTYPE = np.float64

_grad_enabled = contextvars.ContextVar("visaware_grad_enabled", default=True)
_kink_log = contextvars.ContextVar("visaware_kink_log", default=None)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def kink_monitor():
    """Collect, for each non-smooth op evaluated inside the block, the smallest
    distance of its input from a kink."""
    margins: list[float] = []
    token = _kink_log.set(margins)
    try:
        yield margins
    finally:
        _kink_log.reset(token)


def _note_kink(distance: np.ndarray) -> None:
    log = _kink_log.get()
    if log is not None and distance.size:
        log.append(float(np.min(distance)))


class Tensor:
    """A row-major float64 array that can participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def assign(self, values) -> None:
        """Replace the payload of a leaf (used by optimizers between steps)."""
        if not self.is_leaf:
            raise ContractError("only leaf tensors can be reassigned")
        arr = np.array(values, dtype=DTYPE)
        if arr.shape != self.data.shape:
            raise DimensionError(f"assign: shape {arr.shape} does not match {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------
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
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an operation.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent,
    each shaped like that parent.
    """
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=DTYPE)
    if arr.flags.writeable and arr.base is None:
        arr.flags.writeable = False
    out.data = arr
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- graph traversal ------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# -- broadcasting helpers --------------------------------------------------

def _is_suffix(short: tuple, long: tuple) -> bool:
    return len(short) <= len(long) and long[len(long) - len(short):] == short


def _check_broadcast(a: tuple, b: tuple, opname: str) -> None:
    if a == b or _is_suffix(a, b) or _is_suffix(b, a):
        return
    raise DimensionError(
        f"{opname}: shapes {a} and {b} are incompatible (only leading axes broadcast)"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    _note_kink(np.abs(x.data))
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def abs_(x: Tensor) -> Tensor:
    _note_kink(np.abs(x.data))
    sign = np.sign(x.data)
    return make_op(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


# -- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ContractError("mean over an empty axis")
    return scale(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over axis -2 of ``x[..., I, d]`` counting only positions where ``mask[..., I]``."""
    m = np.asarray(mask, dtype=DTYPE)
    if m.shape != x.shape[:-1]:
        raise DimensionError(f"masked_mean: mask shape {m.shape} does not match {x.shape[:-1]}")
    counts = m.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("masked_mean: a sequence has no unmasked positions")
    w = m / counts
    out = np.einsum("...i,...id->...d", w, x.data)
    return make_op(out, (x,), lambda g: (w[..., :, None] * g[..., None, :],), "masked_mean")


# -- linear algebra ----------------------------------------------------------

def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, _swap(bd)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = ad.shape[-1], g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(_swap(ad), g), bd.shape)
        return ga, gb

    return make_op(np.matmul(ad, bd), (a, b), bw, "matmul")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g)
        return (full,)

    return make_op(x.data[key], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(
                f"concat: shapes {[u.shape for u in tensors]} disagree off axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return make_op(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))), "stack")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return make_op(table.data[idx], (table,), bw, "embedding")


def gather_last(x: Tensor, index) -> Tensor:
    """Pick ``x[..., index[...]]``: one element per leading position."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"gather_last: index shape {idx.shape} vs {x.shape[:-1]}")
    shape = x.shape
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return make_op(out, (x,), bw, "gather_last")


# -- normalizations --------------------------------------------------------

def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{opname}: non-finite input")


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax over ``axis``. ``mask`` (True = keep) sends excluded entries to exactly 0."""
    _check_finite(x.data, "softmax")
    if x.shape[axis] < 1:
        raise ContractError("softmax over an empty axis")
    d = x.data
    if mask is None:
        shifted = d - d.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
        if not np.all(keep.any(axis=axis)):
            raise ContractError("softmax: a row has every position masked")
        peak = np.where(keep, d, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, d - peak, 0.0)), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return make_op(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if d < 2:
        raise ContractError(f"layer_norm needs at least 2 features, got {d}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        dxhat = g * gd
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(out, (x, gain, bias), bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise NormalizationError("cannot normalize a zero vector")
    y = xd / n
    return make_op(y, (x,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,),
                   "l2_normalize")


# -- composite losses --------------------------------------------------------

def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = gather_last(logp, targets)
    if mask is None:
        return scale(sum_(picked), -1.0 / picked.size)
    m = np.asarray(mask, dtype=DTYPE)
    total = m.sum()
    if total == 0:
        raise ContractError("cross_entropy: every position is masked")
    return scale(sum_(mul(picked, Tensor(m))), -1.0 / total)


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.zero_grad()
