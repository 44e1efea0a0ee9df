"""Minimal reverse-mode autodiff over float64 numpy arrays.

Operations performed inside an active :class:`Tape` whose inputs require a
gradient are recorded; :meth:`Tape.backward` replays the records in reverse
and deposits gradients on the leaf tensors.  Outside a tape every op is a
plain numpy computation, which is what evaluation uses.

All reductions run in a fixed index order (no threading, no reassociation),
so two identical runs give bit-identical values and gradients.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "Tape", "TapeEntry", "tensor", "parameter",
    "add", "sub", "mul", "div", "neg", "matmul", "reshape", "transpose",
    "getitem", "take_rows", "scatter_rows", "concat", "sum", "mean",
    "gelu", "softmax", "layernorm", "cross_entropy",
]

_node_ids = itertools.count(1)
_active_tapes: list["Tape"] = []

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense float64 array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.node_id = next(_node_ids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def tensor(data) -> Tensor:
    """Constant tensor (never receives a gradient)."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates a gradient on backward."""
    return Tensor(data, requires_grad=True)


@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple
    output_id: int
    backward: Callable

    @property
    def input_ids(self) -> tuple:
        return tuple(t.node_id for t in self.inputs)


class Tape:
    """Ordered record of the differentiable ops of one forward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded.  A tape is meant for a single forward/backward pair.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op, inputs, out, backward):
        for t in inputs:
            if t.requires_grad and t.node_id not in self._produced:
                self._leaves.setdefault(t.node_id, t)
        self.entries.append(TapeEntry(op, tuple(inputs), out.node_id, backward))
        self._produced.add(out.node_id)

    def backward(self, loss: Tensor):
        """Populate ``.grad`` on every leaf that contributed to ``loss``.

        Gradients are accumulated (added to any existing ``.grad``).
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {loss.node_id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output_id, None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
        if loss.node_id not in self._produced and loss.requires_grad:
            self._leaves.setdefault(loss.node_id, loss)
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                continue
            g = np.array(np.broadcast_to(g, leaf.shape), dtype=np.float64)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _active_tapes[-1] if _active_tapes else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor._wrap(data, requires_grad=True)
        tape.record(op, inputs, out, backward)
        return out
    return Tensor._wrap(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape),
                            _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def gelu(x) -> Tensor:
    """Exact erf-form GELU."""
    x = _as_tensor(x)
    xd = x.data
    cdf = ndtr(xd)  # 0.5 * (1 + erf(x / sqrt 2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _emit("gelu", xd * cdf, (x,), backward)


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # batch of rows times one matrix: a single 2-D product each way
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def backward2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), backward2)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    return _emit("matmul", out, (a, b), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis
               for p in parts)


def getitem(x, idx) -> Tensor:
    """Basic or advanced indexing.

    Basic indices select each element at most once, so the backward is a
    plain assignment; advanced indices scatter with ``np.add.at``.
    """
    x = _as_tensor(x)
    shape = x.shape
    basic = _is_basic(idx)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _emit("getitem", np.array(x.data[idx]), (x,), backward)


def take_rows(x, rows) -> Tensor:
    """``x[rows]`` along axis 0 for distinct ``rows``."""
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows] = g
        return (out,)

    return _emit("take_rows", x.data[rows], (x,), backward)


def scatter_rows(values, rows, n: int) -> Tensor:
    """Zeros of ``(n, *values.shape[1:])`` with ``values[j]`` placed at distinct ``rows[j]``."""
    values = _as_tensor(values)
    rows = np.asarray(rows, dtype=np.intp)
    if np.unique(rows).size != rows.size:
        raise ContractError("scatter_rows needs distinct row indices")
    out = np.zeros((n,) + values.shape[1:])
    out[rows] = values.data
    return _emit("scatter_rows", out, (values,), lambda g: (g[rows],))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis)
            for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


# -- reductions ----------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)),
                 (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _emit("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)),
                 (x,), backward)


# -- fused nonlinear ops -------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Softmax with max subtraction."""
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


def layernorm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} "
            f"do not match input {x.shape}")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = (rstd / d) * (d * dxhat
                           - dxhat.sum(axis=-1, keepdims=True)
                           - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layernorm", xhat * gd + beta.data, (x, gamma, beta), backward)


def cross_entropy(logits, target) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under ``logits``.

    ``logits`` has classes on the last axis; ``target`` has the remaining
    shape (a scalar for a single logit vector).
    """
    logits = _as_tensor(logits)
    target = np.asarray(target, dtype=np.intp)
    c = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy target shape {target.shape} does not match "
            f"logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ContractError(
            f"cross_entropy target out of range [0, {c}): "
            f"min {target.min()}, max {target.max()}")
    z = logits.data.reshape(-1, c)
    t = target.reshape(-1)
    n = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    picked = z[np.arange(n), t]
    loss = (lse - picked).mean()
    probs = e / s

    def backward(g):
        d = probs.copy()
        d[np.arange(n), t] -= 1.0
        return ((g / n) * d.reshape(logits.shape),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), backward)
