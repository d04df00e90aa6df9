"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a graph node when at least one input requires a gradient and
grad mode is on. ``backward`` linearises the graph reachable from a scalar
loss into a :class:`Tape` (inputs before outputs) and walks it once in
reverse, so shared subexpressions accumulate the sum of their path
contributions.

Tape policy: a tape is rebuilt from the loss on every ``backward``/``grad``
call and dropped afterwards; the graph itself stays alive for as long as the
loss tensor does, which lets the trainer take several gradients of the same
forward pass (one per task loss) without re-running it.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def check_mode():
    """Create new tensors and parameters in float64 (gradient checking only)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward: Callable


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "iub" or arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str | None:
        return self._node.op if self._node is not None else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self):
        return self.shape[0]

    # -- operators ----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named leaf tensor that always takes part in differentiation."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        arr = np.array(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        super().__init__(arr, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bshape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _bshape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _bshape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, float(a))
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _bshape(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _bshape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), back, "div")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


# -- elementwise unary ------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    # s(1-s) from e directly: stays nonzero where out has rounded to 1
    dout = (e / np.square(1.0 + e)).astype(xd.dtype)
    return _result(out, (x,), lambda g: (g * dout,), "sigmoid")


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = (0.5 * (1.0 + erf(xd * _SQRT_HALF))).astype(xd.dtype)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), back, "gelu")


# -- reductions -------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# -- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, back, "concat")


def roll(x: Tensor, shifts, axes) -> Tensor:
    neg = tuple(-s for s in shifts)
    return _result(np.roll(x.data, shifts, axes), (x,),
                   lambda g: (np.roll(g, neg, axes),), "roll")


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        if _is_fancy(key):
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return _result(np.array(x.data[key]), (x,), back, "getitem")


def _is_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather ``x`` along ``axis`` at integer ``index`` (duplicates allowed)."""
    index = np.asarray(index)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        gm = np.moveaxis(g, axis, 0).reshape(index.size, -1)
        om = np.moveaxis(out, axis, 0).reshape(shape[axis], -1)
        np.add.at(om, index.ravel(), gm)
        return (np.moveaxis(om.reshape((shape[axis],) + tuple(np.delete(shape, axis))), 0, axis),)

    flat = np.take(x.data, index.ravel(), axis=axis)
    out = flat.reshape(shape[:axis] + index.shape + shape[axis + 1:])
    if index.ndim != 1:
        orig = back

        def back(g):  # noqa: F811
            return orig(g.reshape(flat.shape))

    return _result(out, (x,), back, "take")


def apply_matrix(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    """Linear map ``m`` (out x in) applied along one axis of ``x``."""
    m = np.asarray(m, dtype=x.dtype)
    if m.shape[1] != x.shape[axis]:
        raise DimensionError(f"apply_matrix: {m.shape} cannot act on axis {axis} of {x.shape}")
    out = np.moveaxis(np.tensordot(x.data, m, axes=([axis], [1])), -1, axis)

    def back(g):
        return (np.moveaxis(np.tensordot(g, m, axes=([axis], [0])), -1, axis),)

    return _result(np.ascontiguousarray(out), (x,), back, "apply_matrix")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    wd = w.data
    out = x2 @ wd
    if b is not None:
        out += b.data

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out.reshape(lead + (wd.shape[1],)), inputs, back, "linear")


# -- normalisation / probability --------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs width {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean negative log-likelihood over the non-ignored positions.

    ``logits`` is (..., K) and ``labels`` has the leading shape. Returns 0 when
    every position is ignored.
    """
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    z = logits.data.reshape(-1, k)
    lab = labels.reshape(-1)
    valid = lab != ignore_index
    nvalid = int(valid.sum())
    if np.any(valid & ((lab < 0) | (lab >= k))):
        raise ContractError("cross_entropy: label outside [0, K) and not ignored")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(valid, lab, 0)
    picked = logp[np.arange(lab.size), safe]
    loss = -(picked * valid).sum() / max(nvalid, 1)

    def back(g):
        p = np.exp(logp)
        p[np.arange(lab.size), safe] -= 1.0
        p *= valid[:, None] * (g / max(nvalid, 1))
        return (p.reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and targets."""
    zd = logits.data
    y = np.broadcast_to(np.asarray(targets, dtype=zd.dtype), zd.shape)
    loss = (np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))).mean()
    n = zd.size

    def back(g):
        e = np.exp(-np.abs(zd))
        p = np.where(zd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((p - y) * (g / n),)

    return _result(np.asarray(loss, dtype=zd.dtype), (logits,), back, "bce_with_logits")


# -- differentiation --------------------------------------------------------

class Tape:
    """Topologically ordered nodes reachable from one output."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.inputs:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        self.order = order

    def __len__(self):
        return len(self.order)

    def restrict_to(self, sources: Iterable[Tensor]) -> None:
        """Keep only nodes that depend on at least one of ``sources``."""
        live = {id(s) for s in sources}
        kept = []
        for t in self.order:
            if id(t) in live or (
                t._node is not None and any(id(p) in live for p in t._node.inputs)
            ):
                live.add(id(t))
                kept.append(t)
        self.order = kept

    def run(self, root: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(root): seed}
        member = {id(t) for t in self.order}
        leaves: dict[int, np.ndarray] = {}
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                leaves[id(t)] = g
                continue
            for p, gp in zip(t._node.inputs, t._node.backward(g)):
                if gp is None or not p.requires_grad or id(p) not in member:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + gp
                else:
                    grads[k] = gp
        return leaves


def _check_scalar(loss: Tensor) -> None:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad``; return grads of named parameters."""
    _check_scalar(loss)
    tape = Tape(loss)
    leaves = tape.run(loss, np.ones(loss.shape, dtype=loss.dtype))
    out = {}
    for t in tape.order:
        g = leaves.get(id(t))
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        if isinstance(t, Parameter):
            out[t.name] = t.grad
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching ``.grad``.

    Only the part of the graph downstream of ``wrt`` is traversed.
    """
    _check_scalar(loss)
    tape = Tape(loss)
    tape.restrict_to(wrt)
    leaves = tape.run(loss, np.ones(loss.shape, dtype=loss.dtype))
    return [leaves.get(id(t), np.zeros_like(t.data)) for t in wrt]
