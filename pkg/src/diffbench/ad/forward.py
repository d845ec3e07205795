"""Forward-mode AD with multi-directional dual numbers.

A :class:`Dual` carries an array value together with ``s`` directional
derivatives stacked along a new leading axis, so ``derivs.shape`` is always
``(s,) + value.shape``.  The width ``s`` is fixed for one evaluation.
"""

from __future__ import annotations

import numpy as np

from diffbench.ad._base import ADValue, primal
from diffbench.errors import DimensionError, UnsupportedOperationError


class Dual(ADValue):
    """Array value plus a fixed number of tangent directions."""

    __slots__ = ("value", "derivs")

    def __init__(self, value, derivs):
        self.value = np.asarray(value, dtype=float)
        self.derivs = np.asarray(derivs, dtype=float)
        if self.derivs.shape[1:] != self.value.shape:
            raise DimensionError(
                f"derivs shape {self.derivs.shape} does not extend value shape {self.value.shape}"
            )

    @classmethod
    def seeded(cls, x, seed) -> "Dual":
        """Dual input whose tangents are the columns of ``seed`` (n x s)."""
        x = np.asarray(x, dtype=float)
        seed = np.asarray(seed, dtype=float).reshape(x.size, -1)
        return cls(x, seed.T.reshape((seed.shape[1],) + x.shape))

    @property
    def width(self) -> int:
        return self.derivs.shape[0]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Dual(value={self.value!r}, width={self.width})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return Dual(-self.value, -self.derivs)

    def __pos__(self):
        return self

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __pow__(self, other):
        raise UnsupportedOperationError("power", engine="dual")

    # comparisons act on the primal value only
    def __lt__(self, other):
        return self.value < primal(other)

    def __le__(self, other):
        return self.value <= primal(other)

    def __gt__(self, other):
        return self.value > primal(other)

    def __ge__(self, other):
        return self.value >= primal(other)

    # structural -----------------------------------------------------------

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        d = self.derivs[(slice(None),) + idx]
        if not d.any():
            # identically-zero tangent: hand back a constant so later ops skip it
            return self.value[idx]
        return Dual(self.value[idx], d)

    @property
    def T(self):
        return _transpose(self)

    def transpose(self, *axes):
        return _transpose(self, axes or None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return _max(self, axis=axis, keepdims=keepdims)

    # numpy protocols ------------------------------------------------------

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            raise UnsupportedOperationError(f"{ufunc.__name__}.{method}", engine="dual")
        if ufunc in _COMPARISONS:
            return ufunc(*(primal(v) for v in inputs))
        fn = _UFUNCS.get(ufunc)
        if fn is None:
            raise UnsupportedOperationError(ufunc.__name__, engine="dual")
        return fn(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        fn = _FUNCTIONS.get(func)
        if fn is None:
            raise UnsupportedOperationError(func.__name__, engine="dual")
        return fn(*args, **kwargs)


def _width(*xs) -> int:
    for x in xs:
        if isinstance(x, ADValue) and not isinstance(x, Dual):
            raise UnsupportedOperationError(f"mixing Dual with {type(x).__name__}", engine="dual")
    widths = {x.width for x in xs if isinstance(x, Dual)}
    if len(widths) != 1:
        raise DimensionError(f"mixed tangent widths {sorted(widths)}")
    return widths.pop()


def _tangent(x, ndim: int):
    """Tangent of ``x`` aligned for broadcasting against an ``ndim`` result, or None."""
    if not isinstance(x, Dual):
        return None
    d = x.derivs
    pad = ndim - x.value.ndim
    if pad:
        d = d.reshape((d.shape[0],) + (1,) * pad + x.value.shape)
    return d


def _make(value, derivs, width):
    value = np.asarray(value, dtype=float)
    full = (width,) + value.shape
    if derivs is None:
        derivs = np.zeros(full)
    elif derivs.shape != full:
        derivs = np.broadcast_to(derivs, full)
    return Dual(value, derivs)


def _add(a, b):
    s = _width(a, b)
    v = primal(a) + primal(b)
    da, db = _tangent(a, np.ndim(v)), _tangent(b, np.ndim(v))
    d = da if db is None else db if da is None else da + db
    return _make(v, d, s)


def _sub(a, b):
    s = _width(a, b)
    v = primal(a) - primal(b)
    da, db = _tangent(a, np.ndim(v)), _tangent(b, np.ndim(v))
    d = da if db is None else -db if da is None else da - db
    return _make(v, d, s)


def _mul(a, b):
    s = _width(a, b)
    va, vb = primal(a), primal(b)
    v = va * vb
    da, db = _tangent(a, np.ndim(v)), _tangent(b, np.ndim(v))
    d = None
    if da is not None:
        d = da * vb
    if db is not None:
        d = va * db if d is None else d + va * db
    return _make(v, d, s)


def _div(a, b):
    s = _width(a, b)
    va, vb = primal(a), primal(b)
    v = va / vb
    da, db = _tangent(a, np.ndim(v)), _tangent(b, np.ndim(v))
    d = None
    if da is not None:
        d = da / vb
    if db is not None:
        t = db * (v / vb)
        d = -t if d is None else d - t
    return _make(v, d, s)


def _neg(a):
    return -a


def _unary(fn, dfn):
    def op(a):
        v = fn(a.value)
        return Dual(v, a.derivs * dfn(a.value, v))

    return op


_exp = _unary(np.exp, lambda x, v: v)
_log = _unary(np.log, lambda x, v: 1.0 / x)
_sqrt = _unary(np.sqrt, lambda x, v: 0.5 / v)
_sin = _unary(np.sin, lambda x, v: np.cos(x))
_cos = _unary(np.cos, lambda x, v: -np.sin(x))


def _maximum(a, b):
    s = _width(a, b)
    va, vb = primal(a), primal(b)
    return _where(va >= vb, a, b, width=s)


def _where(cond, a, b, width=None):
    s = width or _width(a, b)
    cond = np.asarray(primal(cond), dtype=bool)
    v = np.where(cond, primal(a), primal(b))
    da, db = _tangent(a, v.ndim), _tangent(b, v.ndim)
    if da is None:
        da = np.zeros(1)
    if db is None:
        db = np.zeros(1)
    return _make(v, np.where(cond, da, db), s)


def _shift_axis(axis, ndim):
    if axis is None:
        return tuple(range(1, ndim + 1))
    if isinstance(axis, tuple):
        return tuple(a % ndim + 1 for a in axis)
    return axis % ndim + 1


def _sum(a, axis=None, keepdims=False, **kwargs):
    if not isinstance(a, Dual):
        return np.sum(a, axis=axis, keepdims=keepdims)
    v = np.sum(a.value, axis=axis, keepdims=keepdims)
    d = np.sum(a.derivs, axis=_shift_axis(axis, a.ndim), keepdims=keepdims)
    return Dual(v, d)


def _max(a, axis=None, keepdims=False, **kwargs):
    if not isinstance(a, Dual):
        return np.max(a, axis=axis, keepdims=keepdims)
    if a.size == 0:
        raise DimensionError("max of an empty array")
    if axis is None:
        flat = a.reshape(-1)
        i = int(np.argmax(flat.value))
        out = flat[i]
        if keepdims:
            out = out.reshape((1,) * a.ndim)
        return out
    ax = axis % a.ndim
    idx = np.argmax(a.value, axis=ax, keepdims=True)
    v = np.take_along_axis(a.value, idx, axis=ax)
    d = np.take_along_axis(a.derivs, idx[None], axis=ax + 1)
    if not keepdims:
        v = np.squeeze(v, axis=ax)
        d = np.squeeze(d, axis=ax + 1)
    return Dual(v, d)


def _matmul(a, b):
    s = _width(a, b)
    va, vb = primal(a), primal(b)
    v = va @ vb
    d = None
    if isinstance(a, Dual):
        d = a.derivs @ vb
    if isinstance(b, Dual):
        if vb.ndim == 1:
            t = (va @ b.derivs[..., None])[..., 0]
        else:
            t = va @ b.derivs
        d = t if d is None else d + t
    return _make(v, d, s)


def _transpose(a, axes=None):
    if not isinstance(a, Dual):
        return np.transpose(a, axes)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    return Dual(np.transpose(a.value, axes), np.transpose(a.derivs, (0,) + tuple(x + 1 for x in axes)))


def _reshape(a, shape, **kwargs):
    if not isinstance(a, Dual):
        return np.reshape(a, shape)
    if isinstance(shape, int):
        shape = (shape,)
    v = a.value.reshape(shape)
    return Dual(v, a.derivs.reshape((a.width,) + v.shape))


def _stack(arrays, axis=0, **kwargs):
    arrays = list(arrays)
    s = _width(*arrays)
    v = np.stack([primal(x) for x in arrays], axis=axis)
    ax = axis % v.ndim + 1
    parts = []
    for x in arrays:
        shape = np.shape(primal(x))
        parts.append(x.derivs if isinstance(x, Dual) else np.zeros((s,) + shape))
    return Dual(v, np.stack(parts, axis=ax))


def _concatenate(arrays, axis=0, **kwargs):
    arrays = list(arrays)
    s = _width(*arrays)
    v = np.concatenate([primal(x) for x in arrays], axis=axis)
    ax = axis % v.ndim + 1
    parts = []
    for x in arrays:
        shape = np.shape(primal(x))
        parts.append(x.derivs if isinstance(x, Dual) else np.zeros((s,) + shape))
    return Dual(v, np.concatenate(parts, axis=ax))


def _where_fn(cond, a, b):
    return _where(cond, a, b)


_UFUNCS = {
    np.add: _add,
    np.subtract: _sub,
    np.multiply: _mul,
    np.true_divide: _div,
    np.negative: _neg,
    np.exp: _exp,
    np.log: _log,
    np.sqrt: _sqrt,
    np.sin: _sin,
    np.cos: _cos,
    np.maximum: _maximum,
    np.matmul: _matmul,
}

_COMPARISONS = {np.less, np.less_equal, np.greater, np.greater_equal, np.equal, np.not_equal}

_FUNCTIONS = {
    np.sum: _sum,
    np.max: _max,
    np.amax: _max,
    np.where: _where_fn,
    np.stack: _stack,
    np.concatenate: _concatenate,
    np.reshape: _reshape,
    np.transpose: _transpose,
    np.shape: lambda a: a.shape,
    np.ndim: lambda a: a.ndim,
}


def grad_forward(f, x, seed=None, chunk: int | None = None) -> np.ndarray:
    """Return ``J(x) @ seed`` for ``f`` evaluated on dual numbers.

    ``seed`` defaults to the identity (full Jacobian).  The result has shape
    ``(m, s)`` where ``m`` is the flattened output size.  ``chunk`` limits how
    many seed columns are propagated per evaluation of ``f``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    seed = np.eye(n) if seed is None else np.asarray(seed, dtype=float)
    if seed.ndim == 1:
        seed = seed.reshape(-1, 1)
    if seed.shape[0] != n:
        raise DimensionError(f"seed has {seed.shape[0]} rows, x has {n} entries")
    s = seed.shape[1]
    step = chunk or max(s, 1)
    blocks = []
    for lo in range(0, max(s, 1), step):
        cols = seed[:, lo : lo + step]
        y = f(Dual.seeded(x, cols))
        if isinstance(y, Dual):
            blocks.append(y.derivs.reshape(cols.shape[1], -1).T)
        else:
            blocks.append(np.zeros((np.size(y), cols.shape[1])))
    return np.concatenate(blocks, axis=1) if s else blocks[0][:, :0]
