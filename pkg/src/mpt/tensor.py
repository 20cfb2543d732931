"""A small dense-tensor engine with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
Calling :meth:`Tensor.backward` on a scalar sorts the recorded graph
topologically (the tape) and replays the closures in reverse.

Storage is a numpy array; float64 is the default because the gradient checks
in this package are stated for double precision.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, VocabularyError

DEFAULT_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        if type(data) is np.ndarray and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype.kind != "f":
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # -- backward ------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

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

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


_state = threading.local()


class no_grad:
    """Context manager: operations inside record no graph (faster forward-only evaluation)."""

    def __enter__(self):
        self._prev = getattr(_state, "disabled", False)
        _state.disabled = True

    def __exit__(self, *exc):
        _state.disabled = self._prev


def grad_enabled():
    return not getattr(_state, "disabled", False)


def _make(data, parents, backward):
    if getattr(_state, "disabled", False) or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_axis(x, axis, op):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def scale(a, factor):
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, ax1, ax2):
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, index):
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward)


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading batch axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner extents disagree for {ad.shape} and {bd.shape}")
    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul: batch extents disagree for {ad.shape} and {bd.shape}") from None

    def backward(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    axis = _check_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x, axis=-1):
    axis = _check_axis(x, axis, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def layernorm(x, gain, bias, axis=-1, eps=1e-5):
    axis = _check_axis(x, axis, "layernorm")
    xd = x.data
    n = xd.shape[axis]
    if n < 1:
        raise DimensionError("layernorm: normalised axis is empty")
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise DimensionError(f"layernorm: gain {gain.shape}/bias {bias.shape} do not match extent {n}")
    xc = xd - xd.sum(axis=axis, keepdims=True) / n
    var = (xc * xc).sum(axis=axis, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if axis == xd.ndim - 1:
        g_b, b_b = gain.data, bias.data
    else:
        bshape = [1] * xd.ndim
        bshape[axis] = n
        g_b, b_b = gain.data.reshape(bshape), bias.data.reshape(bshape)
    out = xhat * g_b + b_b
    other = tuple(ax for ax in range(xd.ndim) if ax != axis)

    def backward(g):
        gx_hat = g * g_b
        gx = inv * (
            gx_hat
            - gx_hat.sum(axis=axis, keepdims=True) / n
            - xhat * (gx_hat * xhat).sum(axis=axis, keepdims=True) / n
        )
        ggain = (g * xhat).sum(axis=other)
        gbias = g.sum(axis=other)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# lookup and regularisation
# ---------------------------------------------------------------------------

def embed(ids, table):
    """Gather rows of ``table``; the backward pass scatter-adds into those rows."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embed expects integer ids, got dtype {ids.dtype}")
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        raise VocabularyError(int(ids[bad].flat[0]), vocab)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(out, (table,), backward)


def dropout(x, p, training, rng):
    """Inverted dropout. The mask comes only from ``rng``; identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.dtype)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)
    tol: float = 0.0
    h: float = 0.0

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(np.isfinite(e) and e <= self.tol for e in self.errors.values())

    def lines(self):
        out = [f"{name}: rel err {err:.3e}" for name, err in self.errors.items()]
        out.append(f"max rel err {self.max_error:.3e} (tol {self.tol:g}) -> {'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(analytic, numeric):
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``.

    Normalising by the gradient's scale (rather than entry by entry) keeps
    near-zero entries, whose central differences are dominated by rounding,
    from dominating the report.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    scale_ = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale_ == 0.0:
        return float(diff)
    return float(diff / scale_)


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h=1e-5):
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(f: Callable[[], Tensor], inputs, h=1e-5, tol=1e-6) -> GradcheckReport:
    """Compare autodiff gradients of scalar ``f()`` with central differences.

    ``inputs`` is a sequence of tensors or a ``{name: tensor}`` mapping; ``f``
    closes over them and is re-evaluated with perturbed values. Failing the
    tolerance is reported, never raised.
    """
    named = dict(inputs) if isinstance(inputs, dict) else {f"input{i}": t for i, t in enumerate(inputs)}
    for t in named.values():
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise ContractError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    report = GradcheckReport(tol=tol, h=h)
    for name, t in named.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        report.errors[name] = relative_error(analytic, numerical_grad(f, t, h))
    return report
