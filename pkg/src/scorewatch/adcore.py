"""Reverse-mode automatic differentiation on a recorded tape.

A model program is traced once per data set into a :class:`Tape`: a flat,
topologically ordered list of primitive operations whose operands precede
them. Every node holds an array of independent scalars (elementwise ops
broadcast like numpy), so one node can stand for a whole column of
per-observation quantities. The tape output is the vector of per-observation
conditional log-likelihood terms; the scalar root of a sweep is the masked sum
of that vector over a segment ``s..t`` (1-based, inclusive).

Three derivative modes are provided:

* reverse sweep -> score ``S_{s:t}(theta)``;
* forward-over-reverse (tangents pushed through the reverse sweep) ->
  information-vector products ``I_{s:t}(theta) v`` without forming a matrix;
* second-order forward jets -> per-observation scores and Hessians, an
  independent route used for recursive accumulation and as a test oracle.

Non-smooth primitives (``max``) use the left branch on ties.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DomainError, NumericError, SizeError

PRIMITIVES = (
    "param", "const", "add", "mul", "div", "neg", "exp", "log", "pow", "tanh",
    "max", "select", "sum", "matmul", "take", "reshape", "stack", "concat",
)

DEFAULT_HESSIAN_CAP = 5000


@dataclass(frozen=True)
class ParameterVector:
    """A point in parameter space with optional component labels."""

    values: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size < 1:
            raise DomainError("parameter vector must have dimension >= 1")
        if not np.all(np.isfinite(values)):
            raise DomainError("parameter vector has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = tuple(str(x) for x in self.labels)
            if len(labels) != values.size:
                raise DomainError("labels must match the parameter dimension")
            object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return self.dim

    def replace(self, values) -> "ParameterVector":
        return ParameterVector(values, self.labels)


def as_array(theta) -> np.ndarray:
    if isinstance(theta, ParameterVector):
        return theta.values
    arr = np.asarray(theta, dtype=float).reshape(-1)
    return arr


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple[int, ...] = ()
    attrs: Any = None


# ---------------------------------------------------------------------------
# primal rules


def _mm(x, y, xr, yr):
    """Matrix product of the trailing value axes; leading axes broadcast."""
    if xr == 1:
        x = np.expand_dims(x, -2)
    if yr == 1:
        y = np.expand_dims(y, -1)
    out = np.matmul(x, y)
    if yr == 1:
        out = out[..., 0]
        if xr == 1:
            out = out[..., 0]
    elif xr == 1:
        out = out[..., 0, :]
    return out


def _mT(x, r):
    """Transpose of the value part (1-D values are left alone)."""
    return np.swapaxes(x, -1, -2) if r == 2 else x


def _forward(op, attrs, a, index):
    if op == "add":
        return a[0] + a[1]
    if op == "mul":
        return a[0] * a[1]
    if op == "div":
        return a[0] / a[1]
    if op == "neg":
        return -a[0]
    if op == "exp":
        return np.exp(a[0])
    if op == "log":
        if np.any(a[0] <= 0):
            raise DomainError("log of a nonpositive value", node=index)
        return np.log(a[0])
    if op == "pow":
        return np.power(a[0], attrs)
    if op == "tanh":
        return np.tanh(a[0])
    if op == "max":
        return np.where(a[0] >= a[1], a[0], a[1])
    if op == "select":
        return np.where(attrs, a[0], a[1])
    if op == "sum":
        return np.sum(a[0], axis=attrs)
    if op == "matmul":
        x, y = a
        if x.ndim <= 2 and y.ndim <= 2:
            return x @ y
        return _mm(x, y, x.ndim, y.ndim)
    if op == "take":
        idx, axis = attrs
        if axis == 0:
            return a[0][idx]
        return np.take(a[0], idx, axis=axis)
    if op == "reshape":
        return np.reshape(a[0], attrs)
    if op == "stack":
        if attrs == 0:
            return np.array(a, dtype=float)
        return np.stack(a, axis=attrs)
    if op == "concat":
        return np.concatenate(a, axis=attrs)
    raise ValueError(f"unknown primitive {op!r}")


# ---------------------------------------------------------------------------
# recording


class Var:
    """Tracer handle returned while recording a program."""

    __slots__ = ("_rec", "index", "value")
    __array_ufunc__ = None

    def __init__(self, rec, index, value):
        self._rec = rec
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return self.value.shape[0]

    def __add__(self, other):
        return self._rec.push("add", (self, other))

    def __radd__(self, other):
        return self._rec.push("add", (other, self))

    def __sub__(self, other):
        return self._rec.push("add", (self, self._rec.push("neg", (other,))))

    def __rsub__(self, other):
        return self._rec.push("add", (other, self._rec.push("neg", (self,))))

    def __mul__(self, other):
        return self._rec.push("mul", (self, other))

    def __rmul__(self, other):
        return self._rec.push("mul", (other, self))

    def __truediv__(self, other):
        return self._rec.push("div", (self, other))

    def __rtruediv__(self, other):
        return self._rec.push("div", (other, self))

    def __neg__(self):
        return self._rec.push("neg", (self,))

    def __pow__(self, exponent):
        if isinstance(exponent, Var):
            raise TypeError("only constant exponents are supported")
        return self._rec.push("pow", (self,), float(exponent))

    def __matmul__(self, other):
        return self._rec.push("matmul", (self, other))

    def __rmatmul__(self, other):
        return self._rec.push("matmul", (other, self))

    def __getitem__(self, key):
        if isinstance(key, slice):
            idx = np.arange(self.shape[0])[key]
            return take(self, idx, 0)
        if isinstance(key, tuple):
            out = self
            axis = 0
            for k in key:
                if isinstance(k, slice):
                    out = take(out, np.arange(out.shape[axis])[k], axis)
                    axis += 1
                else:
                    out = take(out, k, axis)
            return out
        return take(self, key, 0)


class _Recorder:
    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.live: list[bool] = []

    def _append(self, node, value, live):
        self.nodes.append(node)
        self.values.append(value)
        self.live.append(live)
        return Var(self, len(self.nodes) - 1, value)

    def const(self, value):
        value = np.asarray(value, dtype=float)
        return self._append(Node("const", (), value), value, False)

    def lift(self, x):
        if isinstance(x, Var):
            if x._rec is not self:
                raise ValueError("Var belongs to another tape")
            return x
        return self.const(x)

    def push(self, op, args, attrs=None):
        vs = [self.lift(a) for a in args]
        index = len(self.nodes)
        value = _forward(op, attrs, [v.value for v in vs], index)
        if not any(self.live[v.index] for v in vs):
            # data-only subgraph: fold into a constant
            return self.const(value)
        node = Node(op, tuple(v.index for v in vs), attrs)
        return self._append(node, np.asarray(value), True)


def _rec_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x._rec
        if isinstance(x, (list, tuple)):
            for y in x:
                if isinstance(y, Var):
                    return y._rec
    return None


def _apply(op, args, attrs=None):
    rec = _rec_of(*args)
    if rec is None:
        return _forward(op, attrs, [np.asarray(a, dtype=float) for a in args], None)
    return rec.push(op, args, attrs)


def exp(x):
    return _apply("exp", (x,))


def log(x):
    return _apply("log", (x,))


def tanh(x):
    return _apply("tanh", (x,))


def maximum(a, b):
    return _apply("max", (a, b))


def select(mask, a, b):
    return _apply("select", (a, b), np.asarray(mask, dtype=bool))


def vsum(x, axis=None):
    return _apply("sum", (x,), axis)


def matmul(a, b):
    return _apply("matmul", (a, b))


def take(x, idx, axis=0):
    if not isinstance(idx, (int, np.integer)):
        idx = np.asarray(idx, dtype=np.intp)
    else:
        idx = int(idx)
    return _apply("take", (x,), (idx, axis))


def reshape(x, shape):
    return _apply("reshape", (x,), tuple(shape))


def stack(xs, axis=0):
    return _apply("stack", tuple(xs), axis)


def concat(xs, axis=0):
    return _apply("concat", tuple(xs), axis)


# ---------------------------------------------------------------------------
# reverse-mode helpers


def _unb(g, shape):
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand_sum(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _scatter(g, shape, idx, axis):
    out = np.zeros(shape)
    key = (slice(None),) * axis + (idx,)
    if isinstance(idx, int):
        out[key] += g
    else:
        np.add.at(out, key, g)
    return out


def _split(g, vals, axis, stacked):
    if stacked:
        return [np.take(g, i, axis=axis) for i in range(len(vals))]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return np.split(g, sizes, axis=axis)


def _vjp(op, attrs, a, y, g):
    """Adjoints of the inputs of one node given the output adjoint."""
    if op == "add":
        return [_unb(g, a[0].shape), _unb(g, a[1].shape)]
    if op == "mul":
        return [_unb(g * a[1], a[0].shape), _unb(g * a[0], a[1].shape)]
    if op == "div":
        return [_unb(g / a[1], a[0].shape), _unb(-g * y / a[1], a[1].shape)]
    if op == "neg":
        return [-g]
    if op == "exp":
        return [g * y]
    if op == "log":
        return [g / a[0]]
    if op == "pow":
        return [g * attrs * np.power(a[0], attrs - 1.0)]
    if op == "tanh":
        return [g * (1.0 - y * y)]
    if op == "max":
        m = a[0] >= a[1]
        return [_unb(np.where(m, g, 0.0), a[0].shape), _unb(np.where(m, 0.0, g), a[1].shape)]
    if op == "select":
        return [_unb(np.where(attrs, g, 0.0), a[0].shape), _unb(np.where(attrs, 0.0, g), a[1].shape)]
    if op == "sum":
        return [_expand_sum(g, a[0].shape, attrs)]
    if op == "matmul":
        return _vjp_matmul(a[0], a[1], g)
    if op == "take":
        idx, axis = attrs
        return [_scatter(g, a[0].shape, idx, axis)]
    if op == "reshape":
        return [np.reshape(g, a[0].shape)]
    if op == "stack":
        return _split(g, a, attrs, True)
    if op == "concat":
        return _split(g, a, attrs, False)
    raise ValueError(f"unknown primitive {op!r}")


def _vjp_matmul(x, y, g):
    xr, yr = x.ndim, y.ndim
    if xr == 1 and yr == 1:
        return [g * y, g * x]
    if xr == 2 and yr == 1:
        return [np.outer(g, y), x.T @ g]
    if xr == 1 and yr == 2:
        return [y @ g, np.outer(x, g)]
    return [g @ y.T, x.T @ g]


def _vjp_dot(op, attrs, a, ad, y, yd, g, gd):
    """Tangent of :func:`_vjp` along input tangents ``ad`` (None = zero)."""
    if op in ("add", "neg", "sum", "take", "reshape", "stack", "concat", "select"):
        return _vjp(op, attrs, a, y, gd)
    if op == "max":
        m = a[0] >= a[1]
        return [_unb(np.where(m, gd, 0.0), a[0].shape), _unb(np.where(m, 0.0, gd), a[1].shape)]
    if op == "mul":
        d0 = gd * a[1]
        d1 = gd * a[0]
        if ad[1] is not None:
            d0 = d0 + g * ad[1]
        if ad[0] is not None:
            d1 = d1 + g * ad[0]
        return [_unb(d0, a[0].shape), _unb(d1, a[1].shape)]
    if op == "div":
        b = a[1]
        d0 = gd / b
        d1 = -(gd * y + g * yd) / b
        if ad[1] is not None:
            d0 = d0 - g * ad[1] / (b * b)
            d1 = d1 + g * y * ad[1] / (b * b)
        return [_unb(d0, a[0].shape), _unb(d1, b.shape)]
    if op == "exp":
        return [gd * y + g * yd]
    if op == "log":
        return [gd / a[0] - g * ad[0] / (a[0] * a[0])]
    if op == "pow":
        c = attrs
        return [gd * c * np.power(a[0], c - 1.0)
                + g * c * (c - 1.0) * np.power(a[0], c - 2.0) * ad[0]]
    if op == "tanh":
        return [gd * (1.0 - y * y) - 2.0 * g * y * yd]
    if op == "matmul":
        out = _vjp_matmul(a[0], a[1], gd)
        if ad[1] is not None:
            out[0] = out[0] + _vjp_matmul(a[0], ad[1], g)[0]
        if ad[0] is not None:
            out[1] = out[1] + _vjp_matmul(ad[0], a[1], g)[1]
        return out
    raise ValueError(f"unknown primitive {op!r}")


def _jvp(op, attrs, a, ad, y):
    """Forward tangent of one node (inputs with None tangent are constant)."""
    if op == "add":
        if ad[0] is None:
            return np.broadcast_to(ad[1], y.shape)
        if ad[1] is None:
            return np.broadcast_to(ad[0], y.shape)
        return np.broadcast_to(ad[0] + ad[1], y.shape)
    if op == "mul":
        out = 0.0
        if ad[0] is not None:
            out = out + ad[0] * a[1]
        if ad[1] is not None:
            out = out + a[0] * ad[1]
        return np.broadcast_to(out, y.shape)
    if op == "div":
        out = 0.0
        if ad[0] is not None:
            out = out + ad[0] / a[1]
        if ad[1] is not None:
            out = out - y * ad[1] / a[1]
        return np.broadcast_to(out, y.shape)
    if op == "neg":
        return -ad[0]
    if op == "exp":
        return y * ad[0]
    if op == "log":
        return ad[0] / a[0]
    if op == "pow":
        return attrs * np.power(a[0], attrs - 1.0) * ad[0]
    if op == "tanh":
        return (1.0 - y * y) * ad[0]
    if op in ("max", "select"):
        m = (a[0] >= a[1]) if op == "max" else attrs
        t0 = 0.0 if ad[0] is None else ad[0]
        t1 = 0.0 if ad[1] is None else ad[1]
        return np.broadcast_to(np.where(m, t0, t1), y.shape)
    if op == "sum":
        return np.sum(ad[0], axis=attrs)
    if op == "matmul":
        out = 0.0
        if ad[0] is not None:
            out = out + _mm(ad[0], a[1], a[0].ndim, a[1].ndim)
        if ad[1] is not None:
            out = out + _mm(a[0], ad[1], a[0].ndim, a[1].ndim)
        return out
    if op == "take":
        idx, axis = attrs
        return np.take(ad[0], idx, axis=axis)
    if op == "reshape":
        return np.reshape(ad[0], attrs)
    if op in ("stack", "concat"):
        ts = [np.zeros(v.shape) if t is None else t for v, t in zip(a, ad)]
        return np.stack(ts, axis=attrs) if op == "stack" else np.concatenate(ts, axis=attrs)
    raise ValueError(f"unknown primitive {op!r}")


# ---------------------------------------------------------------------------
# second-order forward jets
#
# A jet carries the value v (shape s), first derivatives g (shape (k,)+s) and
# second derivatives h (shape (k,k)+s) along the k = d parameter directions.
# None stands for an identically zero component.


def _lift(c, lead, shape):
    """Insert singleton axes so that ``c`` broadcasts against ``shape``."""
    if c is None:
        return None
    r = c.ndim - lead
    if r == len(shape):
        return c
    return c.reshape(c.shape[:lead] + (1,) * (len(shape) - r) + c.shape[lead:])


def _fit(c, lead, shape):
    if c is None:
        return None
    c = _lift(c, lead, shape)
    return np.broadcast_to(c, c.shape[:lead] + shape)


def _plus(*cs):
    out = None
    for c in cs:
        if c is None:
            continue
        out = c if out is None else out + c
    return out


def _outer(x, y):
    if x is None or y is None:
        return None
    return x[:, None] * y[None, :]


def _times(c, v):
    return None if c is None else c * v


def _jet_unary(a, y, f1, f2):
    g = _times(a[1], f1)
    h = _plus(_times(a[2], f1), _times(_outer(a[1], a[1]), f2))
    return g, h


def _jet_mul(a, b, shape):
    ag, bg = _lift(a[1], 1, shape), _lift(b[1], 1, shape)
    ah, bh = _lift(a[2], 2, shape), _lift(b[2], 2, shape)
    g = _plus(_times(ag, b[0]), _times(bg, a[0]))
    cross = _outer(ag, bg)
    if cross is not None:
        cross = cross + np.swapaxes(cross, 0, 1)
    h = _plus(_times(ah, b[0]), _times(bh, a[0]), cross)
    return _fit(g, 1, shape), _fit(h, 2, shape)


def _jet_matmul(a, b):
    xr, yr = a[0].ndim, b[0].ndim
    parts_g, parts_h = [], []
    if a[1] is not None:
        parts_g.append(_mm(a[1], b[0], xr, yr))
    if b[1] is not None:
        parts_g.append(_mm(a[0], b[1], xr, yr))
    if a[2] is not None:
        parts_h.append(_mm(a[2], b[0], xr, yr))
    if b[2] is not None:
        parts_h.append(_mm(a[0], b[2], xr, yr))
    if a[1] is not None and b[1] is not None:
        cross = _mm(a[1][:, None], b[1][None, :], xr, yr)
        parts_h.append(cross + np.swapaxes(cross, 0, 1))
    return _plus(*parts_g), _plus(*parts_h)


def _jet_linear(op, attrs, comps, lead, vals, shape):
    """Apply a linear structural op to a derivative component."""
    if op == "neg":
        return None if comps[0] is None else -comps[0]
    if op == "sum":
        c = comps[0]
        if c is None:
            return None
        if attrs is None:
            return c.sum(axis=tuple(range(lead, c.ndim)))
        ax = attrs if attrs >= 0 else attrs + vals[0].ndim
        return c.sum(axis=ax + lead)
    if op == "take":
        c = comps[0]
        if c is None:
            return None
        idx, axis = attrs
        ax = axis if axis >= 0 else axis + vals[0].ndim
        return np.take(c, idx, axis=ax + lead)
    if op == "reshape":
        c = comps[0]
        return None if c is None else c.reshape(c.shape[:lead] + shape)
    if op in ("stack", "concat"):
        if all(c is None for c in comps):
            return None
        k = next(c for c in comps if c is not None).shape[:lead]
        cs = [np.zeros(k + v.shape) if c is None else c for c, v in zip(comps, vals)]
        ax = attrs if attrs >= 0 else attrs + (len(shape) if op == "stack" else vals[0].ndim)
        if op == "stack":
            return np.stack(cs, axis=ax + lead)
        return np.concatenate(cs, axis=ax + lead)
    if op in ("add",):
        return _fit(_plus(_lift(comps[0], lead, shape), _lift(comps[1], lead, shape)), lead, shape)
    if op in ("max", "select"):
        m = (vals[0] >= vals[1]) if op == "max" else attrs
        if comps[0] is None and comps[1] is None:
            return None
        k = next(c for c in comps if c is not None).shape[:lead]
        c0 = np.zeros(k + shape) if comps[0] is None else _lift(comps[0], lead, shape)
        c1 = np.zeros(k + shape) if comps[1] is None else _lift(comps[1], lead, shape)
        return np.broadcast_to(np.where(m, c0, c1), k + shape)
    raise ValueError(f"unknown linear primitive {op!r}")


def _jet(op, attrs, a, y):
    """Jet (g, h) of one node given input jets ``a[i] = (v, g, h)``."""
    shape = y.shape
    vals = [x[0] for x in a]
    if op in ("add", "neg", "sum", "take", "reshape", "stack", "concat", "max", "select"):
        return (_jet_linear(op, attrs, [x[1] for x in a], 1, vals, shape),
                _jet_linear(op, attrs, [x[2] for x in a], 2, vals, shape))
    if op == "mul":
        return _jet_mul(a[0], a[1], shape)
    if op == "div":
        b = a[1]
        inv = 1.0 / b[0]
        rg, rh = _jet_unary(b, inv, -inv * inv, 2.0 * inv * inv * inv)
        return _jet_mul(a[0], (inv, rg, rh), shape)
    x = a[0]
    if op == "exp":
        return _jet_unary(x, y, y, y)
    if op == "log":
        inv = 1.0 / x[0]
        return _jet_unary(x, y, inv, -inv * inv)
    if op == "pow":
        c = attrs
        return _jet_unary(x, y, c * np.power(x[0], c - 1.0), c * (c - 1.0) * np.power(x[0], c - 2.0))
    if op == "tanh":
        d1 = 1.0 - y * y
        return _jet_unary(x, y, d1, -2.0 * y * d1)
    if op == "matmul":
        return _jet_matmul(a[0], a[1])
    raise ValueError(f"unknown primitive {op!r}")


# ---------------------------------------------------------------------------
# tape


def _accumulate_take(adj, owned, j, shape, idx, g):
    """Scatter-add ``g`` into ``adj[j]`` in place, copying a shared buffer first."""
    if adj[j] is None:
        adj[j] = np.zeros(shape)
        owned[j] = True
    elif not owned[j]:
        adj[j] = np.array(np.broadcast_to(adj[j], shape), dtype=float)
        owned[j] = True
    if isinstance(idx, int):
        adj[j][idx] += g
    else:
        np.add.at(adj[j], idx, g)


@dataclass(frozen=True, eq=False)
class Tape:
    """Immutable recorded computation of the per-term log-likelihood vector.

    Node 0 is the parameter leaf. ``live[i]`` tells whether node ``i``
    depends on the parameters; constant nodes are skipped by all derivative
    sweeps. ``recorded`` keeps the primal values seen while recording.
    """

    nodes: tuple[Node, ...]
    live: tuple[bool, ...]
    output: int
    dim: int
    n_terms: int
    recorded: tuple[np.ndarray, ...] = field(repr=False, default=())

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def inputs(self) -> tuple[int, ...]:
        return (0,)

    def forward(self, theta) -> list:
        theta = as_array(theta)
        if theta.shape != (self.dim,):
            raise DomainError(f"expected {self.dim} parameters, got {theta.shape}")
        vals: list = [None] * len(self.nodes)
        with np.errstate(all="ignore"):
            for i, node in enumerate(self.nodes):
                if node.op == "param":
                    vals[i] = theta
                elif node.op == "const":
                    vals[i] = node.attrs
                else:
                    vals[i] = _forward(node.op, node.attrs, [vals[j] for j in node.args], i)
        out = vals[self.output]
        if not np.all(np.isfinite(out)):
            for i, v in enumerate(vals):
                if not np.all(np.isfinite(v)):
                    raise NumericError("non-finite intermediate value", node=i)
        return vals

    def seed_for(self, s, t) -> np.ndarray:
        n = self.n_terms
        if not (1 <= s <= t <= n):
            raise DomainError(f"segment {s}:{t} outside 1..{n}")
        mask = np.zeros(n)
        mask[s - 1:t] = 1.0
        return mask

    def reverse(self, vals, seed) -> np.ndarray:
        """Gradient of ``sum(seed * output)`` w.r.t. the parameters."""
        adj: list = [None] * len(self.nodes)
        owned = [False] * len(self.nodes)
        adj[self.output] = np.asarray(seed, dtype=float)
        nodes, live = self.nodes, self.live
        with np.errstate(all="ignore"):
            for i in range(self.output, 0, -1):
                g = adj[i]
                if g is None:
                    continue
                node = nodes[i]
                if not live[i] or node.op == "const":
                    continue
                args = node.args
                if node.op == "take" and node.attrs[1] == 0:
                    j = args[0]
                    if live[j]:
                        _accumulate_take(adj, owned, j, vals[j].shape, node.attrs[0], g)
                    continue
                grads = _vjp(node.op, node.attrs, [vals[j] for j in args], vals[i], g)
                for j, gj in zip(args, grads):
                    if live[j]:
                        if adj[j] is None:
                            adj[j] = gj
                        else:
                            adj[j] = adj[j] + gj
                            owned[j] = True
        out = adj[0]
        return np.zeros(self.dim) if out is None else np.array(out, dtype=float)

    def tangents(self, vals, v) -> list:
        """Forward tangents of all live nodes along direction ``v``."""
        tans: list = [None] * len(self.nodes)
        tans[0] = np.asarray(v, dtype=float)
        nodes, live = self.nodes, self.live
        with np.errstate(all="ignore"):
            for i in range(1, len(nodes)):
                if not live[i]:
                    continue
                node = nodes[i]
                tans[i] = _jvp(node.op, node.attrs, [vals[j] for j in node.args],
                               [tans[j] for j in node.args], vals[i])
        return tans

    def hvp(self, vals, seed, v) -> tuple[np.ndarray, np.ndarray]:
        """Forward-over-reverse: returns (gradient, Hessian @ v) of the seeded root."""
        tans = self.tangents(vals, v)
        adj: list = [None] * len(self.nodes)
        adjd: list = [None] * len(self.nodes)
        owned = [False] * len(self.nodes)
        ownedd = [False] * len(self.nodes)
        adj[self.output] = np.asarray(seed, dtype=float)
        adjd[self.output] = np.zeros_like(adj[self.output])
        nodes, live = self.nodes, self.live
        with np.errstate(all="ignore"):
            for i in range(self.output, 0, -1):
                g = adj[i]
                if g is None or not live[i]:
                    continue
                node = nodes[i]
                args = node.args
                if node.op == "take" and node.attrs[1] == 0:
                    j = args[0]
                    if live[j]:
                        shape = vals[j].shape
                        _accumulate_take(adj, owned, j, shape, node.attrs[0], g)
                        _accumulate_take(adjd, ownedd, j, shape, node.attrs[0], adjd[i])
                    continue
                a = [vals[j] for j in args]
                ad = [tans[j] for j in args]
                grads = _vjp(node.op, node.attrs, a, vals[i], g)
                dgrads = _vjp_dot(node.op, node.attrs, a, ad, vals[i], tans[i], g, adjd[i])
                for j, gj, dj in zip(args, grads, dgrads):
                    if live[j]:
                        if adj[j] is None:
                            adj[j], adjd[j] = gj, dj
                        else:
                            adj[j] = adj[j] + gj
                            adjd[j] = adjd[j] + dj
                            owned[j] = ownedd[j] = True
        if adj[0] is None:
            return np.zeros(self.dim), np.zeros(self.dim)
        return np.array(adj[0], dtype=float), np.array(adjd[0], dtype=float)

    def jets(self, vals, order=2):
        """Per-term derivatives by forward mode.

        Returns ``(scores, hessians)`` with shapes ``(n, d)`` and
        ``(n, d, d)``; ``hessians`` is None when ``order == 1``.
        """
        d = self.dim
        g: list = [None] * len(self.nodes)
        h: list = [None] * len(self.nodes)
        g[0] = np.eye(d)
        nodes, live = self.nodes, self.live
        with np.errstate(all="ignore"):
            for i in range(1, len(nodes)):
                if not live[i]:
                    continue
                node = nodes[i]
                a = [(vals[j], g[j], h[j] if order > 1 else None) for j in node.args]
                gi, hi = _jet(node.op, node.attrs, a, vals[i])
                g[i] = gi
                h[i] = hi if order > 1 else None
        n = self.n_terms
        go = g[self.output]
        scores = np.zeros((n, d)) if go is None else np.moveaxis(np.asarray(go), 0, -1).reshape(n, d)
        if order < 2:
            return scores, None
        ho = h[self.output]
        if ho is None:
            hess = np.zeros((n, d, d))
        else:
            hess = np.moveaxis(np.asarray(ho), (0, 1), (-2, -1)).reshape(n, d, d)
        return scores, hess


def record(build, theta, data) -> Tape:
    """Trace ``build(theta_var, data)`` into a :class:`Tape`.

    ``build`` must return the per-term log-likelihood vector.
    """
    theta = as_array(theta)
    rec = _Recorder()
    rec.nodes.append(Node("param"))
    rec.values.append(theta)
    rec.live.append(True)
    theta_var = Var(rec, 0, theta)
    with np.errstate(all="ignore"):
        out = build(theta_var, data)
    if not isinstance(out, Var):
        raise ValueError("program output does not depend on the parameters")
    if out.ndim != 1:
        raise ValueError("program must return a 1-D vector of per-term log-likelihoods")
    n = out.shape[0]
    # keep only nodes the output depends on
    needed = np.zeros(len(rec.nodes), dtype=bool)
    needed[out.index] = True
    needed[0] = True
    for i in range(out.index, 0, -1):
        if needed[i]:
            for j in rec.nodes[i].args:
                needed[j] = True
    remap = -np.ones(len(rec.nodes), dtype=int)
    nodes, live, values = [], [], []
    for i in range(out.index + 1):
        if not needed[i]:
            continue
        node = rec.nodes[i]
        remap[i] = len(nodes)
        nodes.append(Node(node.op, tuple(int(remap[j]) for j in node.args), node.attrs))
        live.append(rec.live[i])
        values.append(rec.values[i])
    tape = Tape(tuple(nodes), tuple(live), int(remap[out.index]), theta.size, n, tuple(values))
    if not np.all(np.isfinite(values[-1])):
        tape.forward(theta)  # raises with the offending node
    return tape


# ---------------------------------------------------------------------------
# program-level API

_TAPES: "weakref.WeakKeyDictionary[Any, dict]" = weakref.WeakKeyDictionary()


def get_tape(program, data, theta=None) -> Tape:
    """Tape for ``(program, data)``, recorded once and cached per data object."""
    per_data = _TAPES.setdefault(data, {})
    tape = per_data.get(program)
    if tape is None:
        if theta is None:
            theta = program.initial_guess(data)
        theta = as_array(theta)
        program.check_domain(theta)
        tape = record(program.build, theta, data)
        per_data[program] = tape
    return tape


class Workspace:
    """Primal values of a tape at one parameter point, reused across sweeps."""

    def __init__(self, program, theta, data):
        theta = as_array(theta)
        program.check_domain(theta)
        self.program = program
        self.theta = theta
        self.tape = get_tape(program, data, theta)
        try:
            self.vals = self.tape.forward(theta)
        except (DomainError, NumericError) as exc:
            program.explain_failure(exc, theta, data)
            raise
        program.check_terms(self.vals[self.tape.output])
        self.n = self.tape.n_terms
        self.dim = self.tape.dim

    @property
    def terms(self) -> np.ndarray:
        return self.vals[self.tape.output]

    def value(self, s=1, t=None) -> float:
        t = self.n if t is None else t
        self.tape.seed_for(s, t)
        return float(np.sum(self.terms[s - 1:t]))

    def gradient(self, s=1, t=None) -> np.ndarray:
        t = self.n if t is None else t
        return self.tape.reverse(self.vals, self.tape.seed_for(s, t))

    def info_vp(self, v, s=1, t=None) -> np.ndarray:
        """Observed information of segment ``s..t`` applied to ``v``."""
        t = self.n if t is None else t
        _, hv = self.tape.hvp(self.vals, self.tape.seed_for(s, t), np.asarray(v, dtype=float))
        return -hv

    def info(self, s=1, t=None, cap=DEFAULT_HESSIAN_CAP) -> np.ndarray:
        d = self.dim
        if d > cap:
            raise SizeError(f"dense information of dimension {d} exceeds cap {cap}")
        t = self.n if t is None else t
        seed = self.tape.seed_for(s, t)
        cols = [-self.tape.hvp(self.vals, seed, e)[1] for e in np.eye(d)]
        mat = np.column_stack(cols) if cols else np.zeros((0, 0))
        scale = np.linalg.norm(mat)
        if np.linalg.norm(mat - mat.T) > 1e-8 * max(scale, 1e-300):
            raise NumericError("observed information is not symmetric")
        return 0.5 * (mat + mat.T)

    def jets(self, order=2):
        return self.tape.jets(self.vals, order=order)


def _check_finite(v):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise DomainError("direction vector has non-finite entries")
    return v


def evaluate(program, theta, data, s=1, t=None) -> float:
    """Conditional log-likelihood of observations ``s..t`` (1-based, inclusive)."""
    return Workspace(program, theta, data).value(s, t)


def gradient(program, theta, data, s=1, t=None) -> np.ndarray:
    """Score of segment ``s..t`` by one reverse sweep."""
    return Workspace(program, theta, data).gradient(s, t)


def hvp(program, theta, data, s=1, t=None, v=None) -> np.ndarray:
    """Observed information of segment ``s..t`` times ``v`` (matrix-free)."""
    ws = Workspace(program, theta, data)
    return ws.info_vp(_check_finite(v), s, t)


def full_hessian(program, theta, data, s=1, t=None, cap=DEFAULT_HESSIAN_CAP) -> np.ndarray:
    """Dense observed information assembled from ``d`` information-vector products."""
    return Workspace(program, theta, data).info(s, t, cap=cap)


def term_derivatives(program, theta, data, order=2):
    """Per-observation scores ``(n, d)`` and Hessians ``(n, d, d)`` by forward jets."""
    return Workspace(program, theta, data).jets(order=order)


def finite_difference_gradient(f, theta, rel_step=1e-6) -> np.ndarray:
    """Central differences with step ``rel_step * (1 + |theta_i|)``."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for i in range(theta.size):
        h = rel_step * (1.0 + abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (f(up) - f(dn)) / (2.0 * h)
    return out

