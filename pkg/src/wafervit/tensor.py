"""Dense tensors with a tape-based reverse-mode autodiff engine.

Every differentiable primitive here records a node on the thread-local
:class:`Tape` when at least one input requires a gradient.  Because nodes are
appended in creation order the tape is already topologically sorted, so
:func:`backward` is a single reverse sweep.

Only the primitives the vision transformer needs are provided.  Losses and
other fused ops can be built on :func:`custom_op`.
"""

import contextlib
import math
import threading
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_state = threading.local()

SQRT_HALF = 1.0 / math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(np.float32)
        _state.grad_enabled = True
        _state.debug = False
        _state.tape = Tape()
    return _state


def get_default_dtype() -> np.dtype:
    return _st().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _st().dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``float64`` for gradient checks)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def set_debug(flag: bool) -> None:
    """Enable finite-output checks after every forward op."""
    _st().debug = bool(flag)


class Tape:
    """Ordered record of differentiable ops for the current thread."""

    def __init__(self):
        self.nodes = []

    def record(self, out: "Tensor") -> None:
        self.nodes.append(out)

    def clear(self) -> None:
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


def get_tape() -> Tape:
    return _st().tape


class Tensor:
    """N-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if _is_scalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

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


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` and, if gradients are live, record it on the tape.

    ``backward(g)`` receives the output gradient and returns one gradient
    (or ``None``) per parent, in order.
    """
    st = _st()
    if st.debug and not np.all(np.isfinite(out)):
        raise NumericError("non-finite value produced by forward op")
    t = Tensor._wrap(out)
    if st.grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
        st.tape.record(t)
    return t


def custom_op(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Public hook for fused ops defined outside this module (e.g. losses)."""
    return _make(out, parents, backward)


# -- elementwise ---------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when ``b`` broadcasts over the leading axes of ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    """Elementwise sum.

    ``b`` may be a scalar, a tensor of identical shape, or a tensor whose
    shape equals a trailing slice of ``a.shape`` (a bias row).
    """
    a = as_tensor(a)
    if _is_scalar(b):
        s = float(b)
        return _make(a.data + s, (a,), lambda g: (g,))
    b = as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    bcast = _check_binary(a, b, "add")
    bshape = b.shape

    def backward(g):
        return g, (_reduce_to(g, bshape) if bcast else g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    return add(a, neg(as_tensor(b)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with the same shape rules as :func:`add`."""
    a = as_tensor(a)
    if _is_scalar(b):
        return scale(a, b)
    b = as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    bcast = _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        gb = g * ad
        return g * bd, (_reduce_to(gb, bd.shape) if bcast else gb)

    return _make(ad * bd, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Batch axes must match exactly; a 2-D right operand is shared across all
    batch entries of ``a`` (the dense-layer case).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


# -- nonlinearities ------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax received non-finite input")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def gelu(x) -> Tensor:
    """Exact GELU: ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * SQRT_HALF))
    y = (xd * cdf).astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * INV_SQRT_2PI
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _make(y, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis as ``(x - mu) / (sigma + eps) * gamma + beta``.

    ``sigma`` is the population standard deviation; ``eps`` is added to it,
    not to the variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},) for input {x.shape}")
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))
    s = sigma + eps
    xhat = xc / s
    gd = gamma.data

    def backward(g):
        gx = g * gd
        ds = -(gx * xc).sum(axis=-1, keepdims=True) / (s * s)
        with np.errstate(divide="ignore", invalid="ignore"):
            dsig = np.where(sigma > 0, ds / (d * sigma), 0.0)
        dx = gx / s
        dx = dx - dx.mean(axis=-1, keepdims=True) + dsig * xc
        lead = tuple(range(xd.ndim - 1))
        return dx.astype(xd.dtype, copy=False), (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward)


def dropout(x, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: scale kept units by ``1/(1-rate)`` at train time."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ContractError(f"dropout rate must be < 1, got {rate}")
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -- layout --------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs >=2-D input, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward)


def slice_(x, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    out = np.array(x.data[index], copy=True)
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(out, (x,), backward)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (_reduce_to(g, src),))


# -- reductions ----------------------------------------------------------

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.dtype),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# -- driver --------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; the tape is cleared afterwards.
    """
    tape = get_tape()
    if loss.size != 1:
        tape.clear()
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        tape.clear()
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.dtype)
                if p._backward is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
            node._backward = None
            node._parents = ()
    finally:
        tape.clear()
    # leaf that is the loss itself
    if loss._backward is None and not loss._parents and id(loss) in grads:
        loss.grad = grads[id(loss)]

