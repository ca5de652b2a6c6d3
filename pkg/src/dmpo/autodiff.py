"""Dense float64 tensors with reverse-mode gradients and forward-mode JVPs.

Three pieces:

* ``Tensor`` — immutable-by-convention wrapper over a row-major float64
  ndarray. Arithmetic builds no graph unless a ``Graph`` is active and a
  ``requires_grad`` tensor participates.
* ``Graph`` — an explicit tape: ordered node list recorded during a forward
  pass, walked in reverse by :meth:`Graph.backward`.
* ``DualTensor`` — (primal, tangent) pairs for one-pass directional
  derivatives; :func:`jvp` evaluates a function built from the ops below on
  duals and returns value plus directional derivative.

Every op output is checked for NaN/Inf and raises ``NonFiniteError`` rather
than propagating silently. Supported rank is <= 2; broadcasting follows
numpy within that limit.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward was asked something the recorded graph cannot answer."""


def _as_array(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise ShapeError(f"rank {a.ndim} > 2 is unsupported (shape {a.shape})")
    return a


def _check_finite(a: Array, op: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


_ACTIVE: list["Graph"] = []


class Tensor:
    """A float64 value. ``requires_grad`` marks trainable leaves."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: Array | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach_array(self) -> Array:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; definitions below once the op functions exist
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean_(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class DualTensor:
    """Forward-mode pair: primal value and tangent of identical shape."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = _as_array(primal)
        self.tangent = _as_array(tangent)
        if self.primal.shape != self.tangent.shape:
            raise ShapeError(
                f"tangent shape {self.tangent.shape} != primal shape {self.primal.shape}"
            )

    @property
    def shape(self):
        return self.primal.shape

    def __repr__(self):
        return f"DualTensor(shape={self.primal.shape})"

    __add__ = Tensor.__add__
    __radd__ = Tensor.__radd__
    __sub__ = Tensor.__sub__
    __rsub__ = Tensor.__rsub__
    __mul__ = Tensor.__mul__
    __rmul__ = Tensor.__rmul__
    __truediv__ = Tensor.__truediv__
    __rtruediv__ = Tensor.__rtruediv__
    __neg__ = Tensor.__neg__
    __matmul__ = Tensor.__matmul__
    __getitem__ = Tensor.__getitem__
    sum = Tensor.sum
    mean = Tensor.mean
    reshape = Tensor.reshape
    T = Tensor.T


class _Node:
    # holds a strong ref to `out` so tensor ids stay unique for the graph's life
    __slots__ = ("out", "parents", "vjp", "op")

    def __init__(self, out, parents, vjp, op):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.op = op


class Graph:
    """Tape of one computation: nodes in execution (topological) order.

    Use as a context manager around a forward pass; then call
    :meth:`backward` on the recorded output.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._out_ids: set[int] = set()

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE.pop()
        assert popped is self
        return False

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp, op: str):
        self.nodes.append(_Node(out, parents, vjp, op))
        self._out_ids.add(id(out))

    def backward(self, output: Tensor, seed: Array | None = None) -> dict[Tensor, Array]:
        """Reverse sweep from ``output``; returns leaf gradients.

        ``seed`` is the cotangent of ``output`` (defaults to ones). Leaf
        tensors (``requires_grad`` and not produced inside this graph) get
        their ``.grad`` accumulated and appear in the returned dict.
        """
        if id(output) not in self._out_ids:
            raise GraphError("output was not produced under this graph")
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = _as_array(seed)
            if seed.shape != output.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} != output shape {output.data.shape}"
                )
        cot: dict[int, Array] = {id(output): seed}
        leaf_grads: dict[Tensor, Array] = {}
        for node in reversed(self.nodes):
            g = cot.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in node.vjp(g):
                pid = id(parent)
                if pid in cot:
                    cot[pid] = cot[pid] + pg
                else:
                    cot[pid] = pg
        for node in self.nodes:
            for parent in node.parents:
                if (
                    parent.requires_grad
                    and id(parent) not in self._out_ids
                    and id(parent) in cot
                    and parent not in leaf_grads
                ):
                    leaf_grads[parent] = cot[id(parent)]
        for t, g in leaf_grads.items():
            t.grad = g if t.grad is None else t.grad + g
        return leaf_grads


def trace(fn: Callable, *args) -> tuple[Tensor, Graph]:
    """Run ``fn(*args)`` under a fresh graph; returns (output, graph)."""
    with Graph() as g:
        out = fn(*args)
    return out, g


@contextmanager
def no_record():
    """Temporarily disable graph recording (for constants like sg targets)."""
    saved = _ACTIVE[:]
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


# ---------------------------------------------------------------------------
# op plumbing


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce_dual(x) -> DualTensor:
    if isinstance(x, DualTensor):
        return x
    data = x.data if isinstance(x, Tensor) else _as_array(x)
    return DualTensor(data, np.zeros_like(data))


def _any_dual(args) -> bool:
    return any(isinstance(a, DualTensor) for a in args)


def _emit(data: Array, parents: tuple[Tensor, ...], vjp_builder, op: str) -> Tensor:
    """Create the op output; record a node when grads are being traced."""
    _check_finite(data, op)
    needs = bool(_ACTIVE) and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        vjp = vjp_builder(grad_parents)
        _ACTIVE[-1]._record(out, grad_parents, vjp, op)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# binary ops


def add(a, b):
    if _any_dual((a, b)):
        da, db = _coerce_dual(a), _coerce_dual(b)
        out = da.primal + db.primal
        _check_finite(out, "add")
        return DualTensor(out, da.tangent + db.tangent)
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def build(parents):
        def vjp(g):
            out = []
            if a.requires_grad:
                out.append((a, _unbroadcast(g, a.data.shape)))
            if b.requires_grad:
                out.append((b, _unbroadcast(g, b.data.shape)))
            return out

        return vjp

    return _emit(data, (a, b), build, "add")


def sub(a, b):
    return add(a, neg(b))


def mul(a, b):
    if _any_dual((a, b)):
        da, db = _coerce_dual(a), _coerce_dual(b)
        out = da.primal * db.primal
        _check_finite(out, "mul")
        return DualTensor(out, da.tangent * db.primal + da.primal * db.tangent)
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    ad, bd = a.data, b.data

    def build(parents):
        def vjp(g):
            out = []
            if a.requires_grad:
                out.append((a, _unbroadcast(g * bd, ad.shape)))
            if b.requires_grad:
                out.append((b, _unbroadcast(g * ad, bd.shape)))
            return out

        return vjp

    return _emit(data, (a, b), build, "mul")


def div(a, b):
    if _any_dual((a, b)):
        da, db = _coerce_dual(a), _coerce_dual(b)
        out = da.primal / db.primal
        _check_finite(out, "div")
        tan = (da.tangent * db.primal - da.primal * db.tangent) / (db.primal * db.primal)
        return DualTensor(out, tan)
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    ad, bd = a.data, b.data

    def build(parents):
        def vjp(g):
            out = []
            if a.requires_grad:
                out.append((a, _unbroadcast(g / bd, ad.shape)))
            if b.requires_grad:
                out.append((b, _unbroadcast(-g * ad / (bd * bd), bd.shape)))
            return out

        return vjp

    return _emit(data, (a, b), build, "div")


def neg(a):
    if isinstance(a, DualTensor):
        return DualTensor(-a.primal, -a.tangent)
    a = _coerce(a)

    def build(parents):
        return lambda g: [(a, -g)]

    return _emit(-a.data, (a,), build, "neg")


def matmul(a, b):
    if _any_dual((a, b)):
        da, db = _coerce_dual(a), _coerce_dual(b)
        out = da.primal @ db.primal
        _check_finite(out, "matmul")
        return DualTensor(out, da.tangent @ db.primal + da.primal @ db.tangent)
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError("matmul requires rank >= 1 operands")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def build(parents):
        def vjp(g):
            out = []
            if a.requires_grad:
                if ad.ndim == 1 and bd.ndim == 2:
                    ga = bd @ g
                elif ad.ndim == 2 and bd.ndim == 1:
                    ga = np.outer(g, bd)
                else:
                    ga = g @ bd.T
                out.append((a, ga))
            if b.requires_grad:
                if ad.ndim == 1 and bd.ndim == 2:
                    gb = np.outer(ad, g)
                elif ad.ndim == 2 and bd.ndim == 1:
                    gb = ad.T @ g
                else:
                    gb = ad.T @ g
                out.append((b, gb))
            return out

        return vjp

    return _emit(data, (a, b), build, "matmul")


# ---------------------------------------------------------------------------
# unary elementwise ops


def _unary(a, fwd: Callable[[Array], Array], dydx: Callable[[Array, Array], Array], op: str):
    """dydx receives (x, y) and returns the local derivative array."""
    if isinstance(a, DualTensor):
        y = fwd(a.primal)
        _check_finite(y, op)
        return DualTensor(y, dydx(a.primal, y) * a.tangent)
    a = _coerce(a)
    y = fwd(a.data)
    x = a.data

    def build(parents):
        return lambda g: [(a, g * dydx(x, y))]

    return _emit(y, (a,), build, op)


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64), "relu")


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x), "softplus")


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def sqrt(a):
    # subgradient 0 at x == 0 so hinge-style losses stay finite
    def d(x, y):
        return np.where(x > 0, 0.5 / np.where(x > 0, y, 1.0), 0.0)

    return _unary(a, np.sqrt, d, "sqrt")


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x), "sin")


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x), "cos")


def square(a):
    return _unary(a, np.square, lambda x, y: 2.0 * x, "square")


# ---------------------------------------------------------------------------
# shape / reduction ops


def reshape(a, shape):
    if isinstance(a, DualTensor):
        return DualTensor(a.primal.reshape(shape), a.tangent.reshape(shape))
    a = _coerce(a)
    old = a.data.shape

    def build(parents):
        return lambda g: [(a, g.reshape(old))]

    return _emit(a.data.reshape(shape), (a,), build, "reshape")


def transpose(a):
    if isinstance(a, DualTensor):
        return DualTensor(a.primal.T, a.tangent.T)
    a = _coerce(a)

    def build(parents):
        return lambda g: [(a, g.T)]

    return _emit(a.data.T.copy(), (a,), build, "transpose")


def take(a, key):
    """Basic slicing/indexing along any axes (numpy semantics)."""
    if isinstance(a, DualTensor):
        return DualTensor(a.primal[key], a.tangent[key])
    a = _coerce(a)
    shape = a.data.shape

    def build(parents):
        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, key, g)
            return [(a, full)]

        return vjp

    return _emit(a.data[key], (a,), build, "slice")


def concat(parts: Sequence, axis: int = 1):
    parts = list(parts)
    if _any_dual(parts):
        duals = [_coerce_dual(p) for p in parts]
        out = np.concatenate([d.primal for d in duals], axis=axis)
        _check_finite(out, "concat")
        return DualTensor(out, np.concatenate([d.tangent for d in duals], axis=axis))
    ts = [_coerce(p) for p in parts]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def build(parents):
        def vjp(g):
            out = []
            sl = [slice(None)] * g.ndim
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl[axis] = slice(lo, hi)
                    out.append((t, g[tuple(sl)]))
            return out

        return vjp

    return _emit(data, tuple(ts), build, "concat")


def _reduce(a, np_fn, scale_fn, axis, op):
    if isinstance(a, DualTensor):
        return DualTensor(np_fn(a.primal, axis=axis), np_fn(a.tangent, axis=axis))
    a = _coerce(a)
    data = np_fn(a.data, axis=axis)
    shape = a.data.shape
    scale = scale_fn(shape, axis)

    def build(parents):
        def vjp(g):
            if axis is None:
                full = np.broadcast_to(g, shape) * scale
            else:
                full = np.broadcast_to(np.expand_dims(g, axis), shape) * scale
            return [(a, full.copy())]

        return vjp

    return _emit(data, (a,), build, op)


def sum_(a, axis=None):
    return _reduce(a, np.sum, lambda shape, ax: 1.0, axis, "sum")


def mean_(a, axis=None):
    def scale(shape, ax):
        n = np.prod(shape) if ax is None else shape[ax]
        return 1.0 / float(n)

    return _reduce(a, np.mean, scale, axis, "mean")


def stop_gradient(a):
    """Pass the value through; block both cotangent and tangent flow."""
    if isinstance(a, DualTensor):
        return DualTensor(a.primal.copy(), np.zeros_like(a.primal))
    a = _coerce(a)
    return Tensor(a.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# forward mode entry point


def jvp(fn: Callable, inputs: Iterable, tangents: Iterable) -> tuple[Tensor, Tensor]:
    """Directional derivative of ``fn`` at ``inputs`` along ``tangents``.

    One dual-number forward pass: returns (value, J @ tangents). ``fn`` must
    be built from the ops in this module.
    """
    duals = []
    for x, t in zip(list(inputs), list(tangents), strict=True):
        xv = x.data if isinstance(x, Tensor) else _as_array(x)
        tv = t.data if isinstance(t, Tensor) else _as_array(t)
        duals.append(DualTensor(xv, tv))
    out = fn(*duals)
    if not isinstance(out, DualTensor):
        # function ignored its inputs entirely; tangent is exactly zero
        out_t = out if isinstance(out, Tensor) else Tensor(out)
        return out_t, Tensor(np.zeros_like(out_t.data))
    return Tensor(out.primal), Tensor(out.tangent)
