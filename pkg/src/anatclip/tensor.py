"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active::

    with Tape() as tape:
        loss = cross_entropy_rows(matmul(x, w), targets)
    tape.backward(loss)        # w.grad now holds dL/dw

Outside a tape every op is a plain numpy computation.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-5
L2_NORM_EPS = 1e-12


class DimensionError(ValueError):
    pass


class ReplayError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    A tape can be replayed backward exactly once.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False
        self._closed = False

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)
        self._closed = True

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        if self._consumed:
            raise ReplayError("tape already replayed; record a fresh forward pass")
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf tensor with requires_grad."""
        if self._consumed:
            raise ReplayError("backward already ran on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        produced = {id(r.output) for r in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, tg in zip(rec.inputs, in_grads):
                if tg is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + tg
                else:
                    grads[key] = tg
                if key not in produced:
                    leaves[key] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.records.clear()


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = Tape.current()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    x2 = xd * xd
    th = np.tanh(c * xd * (1 + xd.dtype.type(0.044715) * x2))
    out = 0.5 * xd * (1 + th)

    def backward(g):
        dinner = c * (1 + xd.dtype.type(3 * 0.044715) * x2)
        return (g * (0.5 * (1 + th) + 0.5 * xd * (1 - th * th) * dinner),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        if gamma.shape != (xd.shape[-1],):
            raise DimensionError(f"layer_norm: gamma {gamma.shape} vs features {xd.shape[-1]}")
        out = out * gamma.data
    if beta is not None:
        if beta.shape != (xd.shape[-1],):
            raise DimensionError(f"layer_norm: beta {beta.shape} vs features {xd.shape[-1]}")
        out = out + beta.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gx = g * gamma.data if gamma is not None else g
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        dg = (g * xhat).sum(axis=lead) if gamma is not None else None
        db = g.sum(axis=lead) if beta is not None else None
        return (dx, dg, db)

    inputs = (x, gamma if gamma is not None else Tensor(0.0), beta if beta is not None else Tensor(0.0))
    return _make(out, inputs, backward)


def l2_normalize_rows(x: Tensor, eps: float = L2_NORM_EPS) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = xd / denom

    def backward(g):
        # rows clamped at eps behave as a plain division by a constant
        active = norm > eps
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / denom),)

    return _make(y, (x,), backward)


# ---------------------------------------------------------------- shapes

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            # fold batch axes into one GEMM for shared weight matrices
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _make(ad @ bd, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of nothing")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref))):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Rows of ``table`` gathered at integer ``indices`` (any shape)."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.data[idx], (table,), backward)


# ---------------------------------------------------------------- reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul_scalar(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- softmax family

def _masked(xd: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return xd
    return np.where(mask, xd, -np.inf)


def _softmax_np(xd: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    z = _masked(xd, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, bool) keeps True entries."""
    y = _softmax_np(x.data, mask)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def cross_entropy_rows(logits: Tensor, targets, mask: np.ndarray | None = None) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target].

    Entries where ``mask`` is False are dropped from the softmax denominator.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_rows expects a matrix, got {logits.shape}")
    m, n = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != m:
        raise DimensionError(f"{t.shape[0]} targets for {m} rows")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise IndexError(f"target index out of range [0, {n})")
    rows = np.arange(m)
    if mask is not None:
        mask = np.broadcast_to(mask, (m, n)).copy()
        mask[rows, t] = True
    z = _masked(logits.data, mask)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[rows, t].mean() if m else np.asarray(0.0)

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (g / m),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
