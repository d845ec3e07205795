"""Reverse-mode AD on an explicit operation tape.

Every operation on a :class:`Var` appends one node to its :class:`Tape`.  A
node keeps its opcode, operand references, static attributes, the computed
value and the local partial derivatives.  The backward sweep walks the nodes
in reverse and only multiplies stored partials into adjoints (or applies the
transpose of a linear structural op such as a sum or an index).

Nodes operate on whole numpy arrays.  Branches decided by comparisons are
frozen at record time: ``np.where`` stores its condition as an attribute.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from diffbench.ad._base import ADValue, primal
from diffbench.errors import DimensionError, UnsupportedOperationError


class _Const:
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class _Op(NamedTuple):
    forward: Callable
    backward: Callable


# Each forward returns (value, partials); each backward returns one adjoint
# contribution per operand (None where the operand does not need one).


def _fwd_add(a, b):
    return a + b, None


def _bwd_add(adj, p, shapes, attrs, need):
    return (_unbroadcast(adj, shapes[0]) if need[0] else None,
            _unbroadcast(adj, shapes[1]) if need[1] else None)


def _fwd_sub(a, b):
    return a - b, None


def _bwd_sub(adj, p, shapes, attrs, need):
    return (_unbroadcast(adj, shapes[0]) if need[0] else None,
            _unbroadcast(-adj, shapes[1]) if need[1] else None)


def _fwd_mul(a, b):
    return a * b, (b, a)


def _fwd_div(a, b):
    v = a / b
    return v, (1.0 / b, -v / b)


def _bwd_elementwise(adj, p, shapes, attrs, need):
    return tuple(_unbroadcast(adj * d, s) if n else None for d, s, n in zip(p, shapes, need))


def _fwd_neg(a):
    return -a, None


def _bwd_neg(adj, p, shapes, attrs, need):
    return (-adj,)


def _fwd_exp(a):
    v = np.exp(a)
    return v, (v,)


def _fwd_log(a):
    return np.log(a), (1.0 / a,)


def _fwd_sqrt(a):
    v = np.sqrt(a)
    return v, (0.5 / v,)


def _fwd_sin(a):
    return np.sin(a), (np.cos(a),)


def _fwd_cos(a):
    return np.cos(a), (-np.sin(a),)


def _fwd_maximum(a, b):
    m = np.asarray(a >= b, dtype=float)
    return np.maximum(a, b), (m, 1.0 - m)


def _fwd_where(a, b, cond):
    m = np.asarray(cond, dtype=float)
    return np.where(cond, a, b), (m, 1.0 - m)


def _fwd_sum(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _expand(adj, shape, axis, keepdims):
    if axis is not None and not keepdims:
        adj = np.expand_dims(adj, axis)
    return np.broadcast_to(adj, shape)


def _bwd_sum(adj, p, shapes, attrs, need):
    return (_expand(adj, shapes[0], attrs["axis"], attrs["keepdims"]),)


def _fwd_max(a, axis, keepdims):
    if a.size == 0:
        raise DimensionError("max of an empty array")
    mask = np.zeros(a.shape)
    if axis is None:
        mask.flat[np.argmax(a)] = 1.0
    else:
        idx = np.argmax(a, axis=axis, keepdims=True)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
    return np.max(a, axis=axis, keepdims=keepdims), (mask,)


def _bwd_max(adj, p, shapes, attrs, need):
    return (_expand(adj, shapes[0], attrs["axis"], attrs["keepdims"]) * p[0],)


def _fwd_matmul(a, b):
    return a @ b, (a, b)


def _bwd_matmul(adj, p, shapes, attrs, need):
    a, b = p
    ga = gb = None
    if a.ndim == 1 and b.ndim == 1:
        return (adj * b if need[0] else None, adj * a if need[1] else None)
    if need[0]:
        if b.ndim == 1:
            ga = adj[..., :, None] * b
        elif a.ndim == 1:
            ga = b @ adj
        else:
            ga = adj @ np.swapaxes(b, -1, -2)
        ga = _unbroadcast(ga, shapes[0])
    if need[1]:
        if a.ndim == 1:
            gb = a[:, None] * adj[..., None, :]
        elif b.ndim == 1:
            gb = np.swapaxes(a, -1, -2) @ adj[..., None]
            gb = gb[..., 0]
        else:
            gb = np.swapaxes(a, -1, -2) @ adj
        gb = _unbroadcast(gb, shapes[1])
    return ga, gb


def _fwd_getitem(a, idx):
    return a[idx], None


def _bwd_getitem(adj, p, shapes, attrs, need):
    g = np.zeros(shapes[0])
    np.add.at(g, attrs["idx"], adj)
    return (g,)


def _fwd_reshape(a, shape):
    return np.reshape(a, shape), None


def _bwd_reshape(adj, p, shapes, attrs, need):
    return (np.reshape(adj, shapes[0]),)


def _fwd_transpose(a, axes):
    return np.transpose(a, axes), None


def _bwd_transpose(adj, p, shapes, attrs, need):
    return (np.transpose(adj, np.argsort(attrs["axes"])),)


def _fwd_stack(*arrays, axis):
    return np.stack(arrays, axis=axis), None


def _bwd_stack(adj, p, shapes, attrs, need):
    ax = attrs["axis"] % adj.ndim
    return tuple(np.take(adj, i, axis=ax) if n else None for i, n in enumerate(need))


def _fwd_concatenate(*arrays, axis):
    return np.concatenate(arrays, axis=axis), None


def _bwd_concatenate(adj, p, shapes, attrs, need):
    ax = attrs["axis"] % adj.ndim
    cuts = np.cumsum([s[ax] for s in shapes])[:-1]
    return tuple(np.split(adj, cuts, axis=ax))


_OPS = {
    "add": _Op(_fwd_add, _bwd_add),
    "sub": _Op(_fwd_sub, _bwd_sub),
    "mul": _Op(_fwd_mul, _bwd_elementwise),
    "div": _Op(_fwd_div, _bwd_elementwise),
    "neg": _Op(_fwd_neg, _bwd_neg),
    "exp": _Op(_fwd_exp, _bwd_elementwise),
    "log": _Op(_fwd_log, _bwd_elementwise),
    "sqrt": _Op(_fwd_sqrt, _bwd_elementwise),
    "sin": _Op(_fwd_sin, _bwd_elementwise),
    "cos": _Op(_fwd_cos, _bwd_elementwise),
    "maximum": _Op(_fwd_maximum, _bwd_elementwise),
    "where": _Op(_fwd_where, _bwd_elementwise),
    "sum": _Op(_fwd_sum, _bwd_sum),
    "max": _Op(_fwd_max, _bwd_max),
    "matmul": _Op(_fwd_matmul, _bwd_matmul),
    "getitem": _Op(_fwd_getitem, _bwd_getitem),
    "reshape": _Op(_fwd_reshape, _bwd_reshape),
    "transpose": _Op(_fwd_transpose, _bwd_transpose),
    "stack": _Op(_fwd_stack, _bwd_stack),
    "concatenate": _Op(_fwd_concatenate, _bwd_concatenate),
}


class Tape:
    """Append-only record of array operations, topologically ordered."""

    def __init__(self):
        self.ops: list[str] = []
        self.args: list[tuple] = []
        self.attrs: list[dict] = []
        self.values: list[np.ndarray] = []
        self.partials: list = []
        self.input_index: int | None = None
        self.output_index: int | None = None

    def __len__(self) -> int:
        return len(self.ops)

    @property
    def n_inputs(self) -> int:
        return int(np.size(self.values[self.input_index]))

    @property
    def outputs(self) -> np.ndarray:
        return self.values[self.output_index]

    @property
    def n_outputs(self) -> int:
        return int(np.size(self.outputs))

    def input(self, x) -> "Var":
        if self.input_index is not None:
            raise DimensionError("tape already has an input node")
        x = np.array(x, dtype=float)
        self.input_index = len(self.ops)
        self._append("input", (), {}, x, None)
        return Var(self, self.input_index, x)

    def mark_output(self, y) -> None:
        if isinstance(y, Var) and y.tape is self:
            self.output_index = y.index
        elif isinstance(y, ADValue):
            raise UnsupportedOperationError(f"output {type(y).__name__} from another engine")
        else:
            self.output_index = len(self.ops)
            self._append("const", (), {}, np.asarray(y, dtype=float), None)

    def _append(self, op, args, attrs, value, partials):
        self.ops.append(op)
        self.args.append(args)
        self.attrs.append(attrs)
        self.values.append(value)
        self.partials.append(partials)

    def _push(self, op, operands, attrs=None):
        attrs = attrs or {}
        args = []
        vals = []
        for x in operands:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise UnsupportedOperationError(f"{op}: operands from different tapes")
                args.append(x.index)
                vals.append(x.value)
            elif isinstance(x, ADValue):
                raise UnsupportedOperationError(f"{op}: mixing Var with {type(x).__name__}")
            else:
                c = np.asarray(x)
                args.append(_Const(c))
                vals.append(c)
        value, partials = _OPS[op].forward(*vals, **attrs)
        idx = len(self.ops)
        self._append(op, tuple(args), attrs, value, partials)
        return Var(self, idx, value)

    def replay(self, x) -> "Tape":
        """Re-evaluate the recorded operations at new inputs.

        Returns a new tape sharing this tape's structure; branch conditions
        stay as recorded.
        """
        x = np.array(x, dtype=float)
        if x.shape != self.values[self.input_index].shape:
            raise DimensionError(f"replay input shape {x.shape} != {self.values[self.input_index].shape}")
        new = Tape.__new__(Tape)
        new.ops, new.args, new.attrs = self.ops, self.args, self.attrs
        new.input_index, new.output_index = self.input_index, self.output_index
        values = []
        partials = []
        for i, op in enumerate(self.ops):
            if op == "input":
                values.append(x)
                partials.append(None)
                continue
            if op == "const":
                values.append(self.values[i])
                partials.append(None)
                continue
            vals = [values[a] if type(a) is int else a.value for a in self.args[i]]
            v, p = _OPS[op].forward(*vals, **self.attrs[i])
            values.append(v)
            partials.append(p)
        new.values, new.partials = values, partials
        return new


class AdjointBuffer:
    """Per-node adjoint storage for one backward sweep; starts all zero."""

    __slots__ = ("adjoints",)

    def __init__(self, n: int):
        self.adjoints: list = [None] * n

    def __len__(self) -> int:
        return len(self.adjoints)

    def accumulate(self, i: int, g) -> None:
        cur = self.adjoints[i]
        self.adjoints[i] = g if cur is None else cur + g


class Var(ADValue):
    """Handle to one tape node."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    @property
    def size(self) -> int:
        return np.size(self.value)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(node={self.index}, value={self.value!r})"

    def __add__(self, other):
        return self.tape._push("add", (self, other))

    def __radd__(self, other):
        return self.tape._push("add", (other, self))

    def __sub__(self, other):
        return self.tape._push("sub", (self, other))

    def __rsub__(self, other):
        return self.tape._push("sub", (other, self))

    def __mul__(self, other):
        return self.tape._push("mul", (self, other))

    def __rmul__(self, other):
        return self.tape._push("mul", (other, self))

    def __truediv__(self, other):
        return self.tape._push("div", (self, other))

    def __rtruediv__(self, other):
        return self.tape._push("div", (other, self))

    def __neg__(self):
        return self.tape._push("neg", (self,))

    def __pos__(self):
        return self

    def __matmul__(self, other):
        return self.tape._push("matmul", (self, other))

    def __rmatmul__(self, other):
        return self.tape._push("matmul", (other, self))

    def __pow__(self, other):
        raise UnsupportedOperationError("power")

    def __lt__(self, other):
        return self.value < primal(other)

    def __le__(self, other):
        return self.value <= primal(other)

    def __gt__(self, other):
        return self.value > primal(other)

    def __ge__(self, other):
        return self.value >= primal(other)

    def __getitem__(self, idx):
        return self.tape._push("getitem", (self,), {"idx": idx})

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

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            raise UnsupportedOperationError(f"{ufunc.__name__}.{method}")
        if ufunc in _COMPARISONS:
            return ufunc(*(primal(v) for v in inputs))
        op = _UFUNCS.get(ufunc)
        if op is None:
            raise UnsupportedOperationError(ufunc.__name__)
        return _tape_of(inputs)._push(op, inputs)

    def __array_function__(self, func, types, args, kwargs):
        fn = _FUNCTIONS.get(func)
        if fn is None:
            raise UnsupportedOperationError(func.__name__)
        return fn(*args, **kwargs)


def _tape_of(xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("no Var operand")


def _sum(a, axis=None, keepdims=False, **kwargs):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    return a.tape._push("sum", (a,), {"axis": axis, "keepdims": keepdims})


def _max(a, axis=None, keepdims=False, **kwargs):
    if not isinstance(a, Var):
        return np.max(a, axis=axis, keepdims=keepdims)
    return a.tape._push("max", (a,), {"axis": axis, "keepdims": keepdims})


def _where(cond, a, b):
    cond = np.asarray(primal(cond), dtype=bool)
    tape = _tape_of((a, b))
    return tape._push("where", (a, b), {"cond": cond})


def _transpose(a, axes=None):
    if not isinstance(a, Var):
        return np.transpose(a, axes)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    return a.tape._push("transpose", (a,), {"axes": tuple(axes)})


def _reshape(a, shape, **kwargs):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    return a.tape._push("reshape", (a,), {"shape": shape})


def _stack(arrays, axis=0, **kwargs):
    arrays = tuple(arrays)
    return _tape_of(arrays)._push("stack", arrays, {"axis": axis})


def _concatenate(arrays, axis=0, **kwargs):
    arrays = tuple(arrays)
    return _tape_of(arrays)._push("concatenate", arrays, {"axis": axis})


_UFUNCS = {
    np.add: "add",
    np.subtract: "sub",
    np.multiply: "mul",
    np.true_divide: "div",
    np.negative: "neg",
    np.exp: "exp",
    np.log: "log",
    np.sqrt: "sqrt",
    np.sin: "sin",
    np.cos: "cos",
    np.maximum: "maximum",
    np.matmul: "matmul",
}

_COMPARISONS = {np.less, np.less_equal, np.greater, np.greater_equal, np.equal, np.not_equal}

_FUNCTIONS = {
    np.sum: _sum,
    np.max: _max,
    np.amax: _max,
    np.where: _where,
    np.stack: _stack,
    np.concatenate: _concatenate,
    np.reshape: _reshape,
    np.transpose: _transpose,
    np.shape: lambda a: a.shape,
    np.ndim: lambda a: a.ndim,
}


def record(f, x):
    """Run ``f`` on a fresh tape.  Returns ``(tape, outputs)``."""
    tape = Tape()
    y = f(tape.input(x))
    tape.mark_output(y)
    return tape, tape.outputs


def grad_reverse(tape: Tape, out_seed=None) -> np.ndarray:
    """Return ``out_seed^T J`` for the recorded function via one backward sweep.

    ``out_seed`` has one entry per (flattened) output; it may be omitted for
    scalar outputs.  The result is flat with one entry per input.
    """
    out = tape.outputs
    if out_seed is None:
        if np.size(out) != 1:
            raise DimensionError("out_seed is required for vector outputs")
        out_seed = np.ones(1)
    out_seed = np.asarray(out_seed, dtype=float)
    if out_seed.size != np.size(out):
        raise DimensionError(f"out_seed has {out_seed.size} entries, tape has {np.size(out)} outputs")
    buf = AdjointBuffer(len(tape))
    buf.adjoints[tape.output_index] = out_seed.reshape(np.shape(out))
    ops, args, attrs, values, partials = tape.ops, tape.args, tape.attrs, tape.values, tape.partials
    for i in range(tape.output_index, tape.input_index, -1):
        adj = buf.adjoints[i]
        if adj is None or ops[i] == "const":
            continue
        node_args = args[i]
        need = tuple(type(a) is int for a in node_args)
        if not any(need):
            continue
        shapes = tuple(np.shape(values[a]) if type(a) is int else np.shape(a.value) for a in node_args)
        contribs = _OPS[ops[i]].backward(adj, partials[i], shapes, attrs[i], need)
        for a, g, n in zip(node_args, contribs, need):
            if n:
                buf.accumulate(a, g)
    g = buf.adjoints[tape.input_index]
    if g is None:
        return np.zeros(tape.n_inputs)
    return np.array(g, dtype=float).reshape(-1)


def jacobian_reverse(tape: Tape) -> np.ndarray:
    """Dense Jacobian, one backward sweep per output."""
    m = tape.n_outputs
    rows = [grad_reverse(tape, np.eye(m)[i]) for i in range(m)]
    return np.array(rows).reshape(m, tape.n_inputs)
