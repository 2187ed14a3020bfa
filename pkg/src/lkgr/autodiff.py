"""Array-valued reverse-mode differentiation.

A :class:`Tape` records every primitive applied to its :class:`Var` leaves
together with the vector-Jacobian product of that primitive.  The module-level
functions (``add``, ``cosh``, ``matvec``, ...) accept either plain numpy
arrays or ``Var`` objects: with no ``Var`` among the inputs they compute the
plain numpy result and nothing is recorded, so the same geometry and model code
serves both taped training and fast inference.

Broadcasting follows numpy; adjoints are summed back to the parent's shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tape",
    "Var",
    "GradCheckReport",
    "gradient_check",
    "value_of",
    "is_var",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "exp",
    "log",
    "cosh",
    "sinh",
    "arcosh",
    "arsinh",
    "tanh",
    "relu",
    "sigmoid",
    "softplus",
    "clamp_min",
    "where",
    "sum",
    "getitem",
    "take",
    "concat",
    "reshape",
    "matvec",
    "softmax",
]


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a taped forward pass or a finite difference."""


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


class Tape:
    """Append-only record of primitive operations.

    Nodes are stored in creation order, which is a topological order because a
    node can only reference nodes that already exist.
    """

    def __init__(self):
        self._parents: list[tuple] = []
        self._shapes: list[tuple] = []
        self._leaves: list[int] = []
        # Smallest observed distance between a kink input (clamp, ReLU) and its kink.
        self.kink_distance = math.inf

    def __len__(self):
        return len(self._parents)

    def var(self, value) -> "Var":
        """Create a leaf holding a float64 copy of ``value``."""
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("non-finite leaf value")
        idx = len(self._parents)
        self._parents.append(())
        self._shapes.append(value.shape)
        self._leaves.append(idx)
        return Var(value, self, idx)

    def _record(self, name: str, out: np.ndarray, pairs) -> "Var":
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite output of '{name}'")
        entries = tuple(
            (x.index, vjp, x.value.shape) for x, vjp in pairs if isinstance(x, Var)
        )
        idx = len(self._parents)
        self._parents.append(entries)
        self._shapes.append(out.shape)
        return Var(out, self, idx)

    def _note_kink(self, distance: np.ndarray):
        if distance.size:
            self.kink_distance = min(self.kink_distance, float(np.min(distance)))

    def backward(self, root: "Var") -> dict[int, np.ndarray]:
        """Propagate adjoints from a scalar ``root`` to every leaf.

        Returns a map from leaf node index to its adjoint; leaves that do not
        influence ``root`` get a zero array.
        """
        if not isinstance(root, Var) or root.tape is not self:
            raise ValueError("root must be a Var recorded on this tape")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
        adj: list = [None] * (root.index + 1)
        adj[root.index] = np.ones(root.value.shape)
        for k in range(root.index, -1, -1):
            g = adj[k]
            if g is None:
                continue
            for p, vjp, shape in self._parents[k]:
                gp = _unbroadcast(np.asarray(vjp(g), dtype=np.float64), shape)
                adj[p] = gp if adj[p] is None else adj[p] + gp
        out = {}
        for leaf in self._leaves:
            g = adj[leaf] if leaf < len(adj) else None
            out[leaf] = np.zeros(self._shapes[leaf]) if g is None else g
        return out


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, value: np.ndarray, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    """Underlying numpy value of a ``Var``; other inputs pass through as arrays."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    out = value_of(a) + value_of(b)
    if tape is None:
        return out
    return tape._record("add", out, [(a, lambda g: g), (b, lambda g: g)])


def sub(a, b):
    tape = _tape_of(a, b)
    out = value_of(a) - value_of(b)
    if tape is None:
        return out
    return tape._record("sub", out, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if tape is None:
        return out
    return tape._record("mul", out, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if tape is None:
        return out
    return tape._record(
        "div", out, [(a, lambda g: g / bv), (b, lambda g: -g * out / bv)]
    )


def neg(a):
    tape = _tape_of(a)
    out = -value_of(a)
    if tape is None:
        return out
    return tape._record("neg", out, [(a, lambda g: -g)])


def _unary(name, fn, dfn):
    """Build an elementwise primitive; ``dfn(x, out)`` is the local derivative."""

    def op(a):
        tape = _tape_of(a)
        av = value_of(a)
        out = fn(av)
        if tape is None:
            return out
        return tape._record(name, out, [(a, lambda g: g * dfn(av, out))])

    op.__name__ = name
    return op


def _dsqrt(x, out):
    # subgradient 0 at the origin of sqrt
    d = np.zeros_like(out)
    np.divide(0.5, out, out=d, where=out > 0)
    return d


def _darcosh(x, out):
    return 1.0 / np.sqrt((x - 1.0) * (x + 1.0))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


sqrt = _unary("sqrt", np.sqrt, _dsqrt)
exp = _unary("exp", np.exp, lambda x, out: out)
log = _unary("log", np.log, lambda x, out: 1.0 / x)
cosh = _unary("cosh", np.cosh, lambda x, out: np.sinh(x))
sinh = _unary("sinh", np.sinh, lambda x, out: np.cosh(x))
arcosh = _unary("arcosh", np.arccosh, _darcosh)
arsinh = _unary("arsinh", np.arcsinh, lambda x, out: 1.0 / np.sqrt(1.0 + x * x))
tanh = _unary("tanh", np.tanh, lambda x, out: 1.0 - out * out)
sigmoid = _unary("sigmoid", _sigmoid, lambda x, out: out * (1.0 - out))
softplus = _unary("softplus", lambda x: np.logaddexp(0.0, x), lambda x, out: _sigmoid(x))


def relu(a):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.maximum(av, 0.0)
    if tape is None:
        return out
    tape._note_kink(np.abs(av))
    return tape._record("relu", out, [(a, lambda g: g * (av > 0))])


def clamp_min(a, lo: float):
    """``max(a, lo)``; the clamped regime (and the kink itself) passes zero gradient."""
    tape = _tape_of(a)
    av = value_of(a)
    out = np.maximum(av, lo)
    if tape is None:
        return out
    tape._note_kink(np.abs(av - lo))
    return tape._record("clamp_min", out, [(a, lambda g: g * (av > lo))])


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is not differentiated."""
    cond = np.asarray(cond, dtype=bool)
    tape = _tape_of(a, b)
    out = np.where(cond, value_of(a), value_of(b))
    if tape is None:
        return out
    return tape._record(
        "where",
        out,
        [(a, lambda g: np.where(cond, g, 0.0)), (b, lambda g: np.where(cond, 0.0, g))],
    )


# --------------------------------------------------------------------------
# reductions and structure
# --------------------------------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    tape = _tape_of(a)
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if tape is None:
        return out
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return tape._record("sum", np.asarray(out), [(a, vjp)])


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)


def getitem(a, idx):
    tape = _tape_of(a)
    av = value_of(a)
    out = av[idx]
    if tape is None:
        return out
    shape = av.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros(shape)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return z

    return tape._record("getitem", np.asarray(out), [(a, vjp)])


def take(a, indices):
    """Gather rows ``a[indices]`` (embedding lookup)."""
    indices = np.asarray(indices, dtype=np.intp)
    tape = _tape_of(a)
    av = value_of(a)
    out = av[indices]
    if tape is None:
        return out
    shape = av.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, indices.reshape(-1), g.reshape((-1,) + shape[1:]))
        return z

    return tape._record("take", out, [(a, vjp)])


def concat(xs, axis=-1):
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def make(k):
        def vjp(g):
            return np.split(g, bounds, axis=axis)[k]

        return vjp

    return tape._record("concat", out, [(x, make(k)) for k, x in enumerate(xs)])


def reshape(a, shape):
    tape = _tape_of(a)
    av = value_of(a)
    out = av.reshape(shape)
    if tape is None:
        return out
    return tape._record("reshape", out, [(a, lambda g: g.reshape(av.shape))])


def matvec(m, x):
    """Batched matrix-vector product ``y[..., i] = sum_j m[..., i, j] x[..., j]``."""
    tape = _tape_of(m, x)
    mv, xv = value_of(m), value_of(x)
    out = np.matmul(mv, xv[..., None])[..., 0]
    if tape is None:
        return out
    return tape._record(
        "matvec",
        out,
        [
            (m, lambda g: g[..., :, None] * xv[..., None, :]),
            (x, lambda g: np.matmul(np.swapaxes(mv, -1, -2), g[..., None])[..., 0]),
        ],
    )


def softmax(a, axis=-1):
    tape = _tape_of(a)
    av = value_of(a)
    z = np.exp(av - np.max(av, axis=axis, keepdims=True))
    out = z / np.sum(z, axis=axis, keepdims=True)
    if tape is None:
        return out
    return tape._record(
        "softmax",
        out,
        [(a, lambda g: out * (g - np.sum(g * out, axis=axis, keepdims=True)))],
    )


# --------------------------------------------------------------------------
# finite-difference validation
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, tuple] | None = None
    boundary: bool = False
    n_coords: int = 0

    def __float__(self):
        return self.max_error


def _scalar(out) -> float:
    v = value_of(out)
    if v.size != 1:
        raise ValueError(f"function must return a scalar, got shape {v.shape}")
    return float(v.reshape(()))


def gradient_check(
    f: Callable,
    params,
    step: float = 1e-5,
    kink_margin: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``params`` is a mapping of name -> array (or a single array); ``f`` receives
    a mapping of the same shape whose values are ``Var`` leaves for the taped
    pass and plain arrays for the finite differences.  The relative error of
    each coordinate uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.

    ``boundary`` is set when some clamp or ReLU input came within
    ``kink_margin`` of its kink, where the finite difference may straddle a
    non-differentiable point.
    """
    single = not isinstance(params, Mapping)
    base = {"p": params} if single else dict(params)
    base = {k: np.array(v, dtype=np.float64) for k, v in base.items()}

    def call(p):
        return f(p["p"]) if single else f(p)

    tape = Tape()
    leaves = {k: tape.var(v) for k, v in base.items()}
    root = call(leaves)
    if not isinstance(root, Var):
        raise ValueError("f does not depend on its parameters")
    adj = tape.backward(root)
    analytic = {k: adj[v.index] for k, v in leaves.items()}

    report = GradCheckReport(max_error=0.0, boundary=tape.kink_distance < kink_margin)
    for name, arr in base.items():
        worst = 0.0
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = _scalar(call(base))
            arr[idx] = orig - step
            fm = _scalar(call(base))
            arr[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite finite difference at {name}{list(idx)}")
            num = (fp - fm) / (2.0 * step)
            ana = float(analytic[name][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            report.n_coords += 1
            if err > worst:
                worst = err
            if err > report.max_error:
                report.max_error = err
                report.worst = (name, idx)
        report.per_param[name] = worst
    return report
