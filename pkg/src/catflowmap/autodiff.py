"""Small differentiation engine on numpy arrays.

Reverse mode is a tape of registered primitives, each with a numpy
vector-Jacobian product.  Forward mode is a dual number ``Dual(primal,
tangent)`` whose tangent rules are themselves written in tape primitives,
so a loss that contains a JVP can still be differentiated in the
parameters (grad-of-JVP).  Nothing else is supported: numpy ufuncs that
are not in the registry raise :class:`UnsupportedPrimitive`.

All values are float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "Dual",
    "GradTape",
    "UnsupportedPrimitive",
    "NonFiniteLoss",
    "PRIMITIVES",
    "forward_jvp",
    "grad",
    "value_and_grad",
    "stop_gradient",
    "value",
]


class UnsupportedPrimitive(TypeError):
    """Raised when a program uses an operation outside the registry."""


class NonFiniteLoss(FloatingPointError):
    """Raised when a differentiated program evaluates to NaN or Inf."""

    def __init__(self, message: str, component: str | None = None):
        super().__init__(message)
        self.component = component


# name -> vjp builder; filled by the @primitive decorator below
PRIMITIVES: dict[str, Callable] = {}


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A float64 array that may sit on the gradient tape."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "op")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), vjp=None, op: str = "leaf",
                 requires_grad: bool = False):
        self.value = _as_array(value)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        return _dispatch_ufunc(ufunc, method, inputs, kwargs)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise UnsupportedPrimitive(f"pow with exponent {p!r}")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, vjp, op) -> Tensor:
    # only record the edge when some input is differentiable
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents, vjp, op, requires_grad=True)
    return Tensor(value, op=op)


def primitive(name: str):
    def register(fn):
        PRIMITIVES[name] = fn
        return fn
    return register


# ---------------------------------------------------------------------------
# reverse-mode primitives (Tensor in, Tensor out)


@primitive("add")
def _t_add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


@primitive("sub")
def _t_sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


@primitive("mul")
def _t_mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape),
                            _unbroadcast(g * av, bv.shape)), "mul")


@primitive("div")
def _t_div(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)), "div")


@primitive("neg")
def _t_neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


@primitive("matmul")
def _t_matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise UnsupportedPrimitive("matmul is registered for 2-d operands only")
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


@primitive("exp")
def _t_exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


@primitive("log")
def _t_log(a: Tensor) -> Tensor:
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,), "log")


@primitive("tanh")
def _t_tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


@primitive("relu")
def _t_relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


@primitive("sin")
def _t_sin(a: Tensor) -> Tensor:
    av = a.value
    return _node(np.sin(av), (a,), lambda g: (g * np.cos(av),), "sin")


@primitive("cos")
def _t_cos(a: Tensor) -> Tensor:
    av = a.value
    return _node(np.cos(av), (a,), lambda g: (-g * np.sin(av),), "cos")


@primitive("sqrt")
def _t_sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


@primitive("square")
def _t_square(a: Tensor) -> Tensor:
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,), "square")


@primitive("clip_min")
def _t_clip_min(a: Tensor, lo: float) -> Tensor:
    mask = a.value > lo
    return _node(np.where(mask, a.value, lo), (a,), lambda g: (g * mask,), "clip_min")


@primitive("sum")
def _t_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


@primitive("reshape")
def _t_reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


@primitive("broadcast_to")
def _t_broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(np.broadcast_to(a.value, shape), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast_to")


@primitive("concat")
def _t_concat(parts: list, axis: int) -> Tensor:
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis),
                 tuple(parts), vjp, "concat")


@primitive("softmax")
def _t_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), vjp, "softmax")


@primitive("stop_gradient")
def _t_stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.value, op="stop_gradient")


# ---------------------------------------------------------------------------
# forward mode


class Dual:
    """Primal value plus directional derivative.

    ``tangent is None`` stands for an exact zero tangent and lets constant
    branches skip the tangent arithmetic entirely.
    """

    __slots__ = ("primal", "tangent")
    __array_priority__ = 1001

    def __init__(self, primal, tangent=None):
        self.primal = _wrap(primal)
        self.tangent = None if tangent is None else _wrap(tangent)

    @property
    def shape(self) -> tuple:
        return self.primal.shape

    @property
    def value(self) -> np.ndarray:
        return self.primal.value

    def tangent_value(self) -> np.ndarray:
        if self.tangent is None:
            return np.zeros(self.shape)
        return self.tangent.value

    def __repr__(self) -> str:
        return f"Dual(shape={self.shape}, zero_tangent={self.tangent is None})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        return _dispatch_ufunc(ufunc, method, inputs, kwargs)

    __add__ = Tensor.__add__
    __radd__ = Tensor.__radd__
    __sub__ = Tensor.__sub__
    __rsub__ = Tensor.__rsub__
    __mul__ = Tensor.__mul__
    __rmul__ = Tensor.__rmul__
    __truediv__ = Tensor.__truediv__
    __rtruediv__ = Tensor.__rtruediv__
    __matmul__ = Tensor.__matmul__
    __rmatmul__ = Tensor.__rmatmul__
    __neg__ = Tensor.__neg__
    __pow__ = Tensor.__pow__
    reshape = Tensor.reshape
    sum = Tensor.sum


def _split(x):
    if isinstance(x, Dual):
        return x.primal, x.tangent
    return _wrap(x), None


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return _t_add(a, b)


def _lift_unary(prim, tangent_rule):
    """Build a public unary op from a primitive and its tangent rule.

    ``tangent_rule(primal_in, primal_out, tangent_in)`` must be expressed
    with tape primitives so that it is differentiable in turn.
    """

    def op(a, *args, **kwargs):
        if isinstance(a, Dual):
            out = prim(a.primal, *args, **kwargs)
            if a.tangent is None:
                return Dual(out)
            return Dual(out, tangent_rule(a.primal, out, a.tangent, *args, **kwargs))
        return prim(_wrap(a), *args, **kwargs)

    op.__name__ = prim.__name__.removeprefix("_t_")
    return op


def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        (pa, ta), (pb, tb) = _split(a), _split(b)
        return Dual(_t_add(pa, pb), _tadd(ta, tb))
    return _t_add(_wrap(a), _wrap(b))


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        (pa, ta), (pb, tb) = _split(a), _split(b)
        tb = None if tb is None else _t_neg(tb)
        return Dual(_t_sub(pa, pb), _tadd(ta, tb))
    return _t_sub(_wrap(a), _wrap(b))


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        (pa, ta), (pb, tb) = _split(a), _split(b)
        t1 = None if ta is None else _t_mul(ta, pb)
        t2 = None if tb is None else _t_mul(pa, tb)
        return Dual(_t_mul(pa, pb), _tadd(t1, t2))
    return _t_mul(_wrap(a), _wrap(b))


def div(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        (pa, ta), (pb, tb) = _split(a), _split(b)
        out = _t_div(pa, pb)
        tangent = ta
        if tb is not None:
            tangent = _tadd(tangent, _t_neg(_t_mul(out, tb)))
        if tangent is not None:
            tangent = _t_div(tangent, pb)
        return Dual(out, tangent)
    return _t_div(_wrap(a), _wrap(b))


def matmul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        (pa, ta), (pb, tb) = _split(a), _split(b)
        t1 = None if ta is None else _t_matmul(ta, pb)
        t2 = None if tb is None else _t_matmul(pa, tb)
        return Dual(_t_matmul(pa, pb), _tadd(t1, t2))
    return _t_matmul(_wrap(a), _wrap(b))


def concat(parts, axis: int = -1):
    if any(isinstance(p, Dual) for p in parts):
        split = [_split(p) for p in parts]
        primal = _t_concat([p for p, _ in split], axis)
        if all(t is None for _, t in split):
            return Dual(primal)
        tangents = [t if t is not None else Tensor(np.zeros(p.shape)) for p, t in split]
        return Dual(primal, _t_concat(tangents, axis))
    return _t_concat([_wrap(p) for p in parts], axis)


neg = _lift_unary(_t_neg, lambda a, out, ta: _t_neg(ta))
exp = _lift_unary(_t_exp, lambda a, out, ta: _t_mul(out, ta))
log = _lift_unary(_t_log, lambda a, out, ta: _t_div(ta, a))
tanh = _lift_unary(
    _t_tanh, lambda a, out, ta: _t_mul(_t_sub(Tensor(1.0), _t_square(out)), ta))
relu = _lift_unary(
    _t_relu, lambda a, out, ta: _t_mul(Tensor((a.value > 0).astype(np.float64)), ta))
sin = _lift_unary(_t_sin, lambda a, out, ta: _t_mul(_t_cos(a), ta))
cos = _lift_unary(_t_cos, lambda a, out, ta: _t_neg(_t_mul(_t_sin(a), ta)))
sqrt = _lift_unary(
    _t_sqrt, lambda a, out, ta: _t_div(ta, _t_mul(Tensor(2.0), out)))
square = _lift_unary(
    _t_square, lambda a, out, ta: _t_mul(_t_mul(Tensor(2.0), a), ta))
clip_min = _lift_unary(
    _t_clip_min,
    lambda a, out, ta, lo: _t_mul(Tensor((a.value > lo).astype(np.float64)), ta))
sum_ = _lift_unary(
    _t_sum, lambda a, out, ta, axis=None, keepdims=False: _t_sum(ta, axis, keepdims))
reshape = _lift_unary(_t_reshape, lambda a, out, ta, shape: _t_reshape(ta, shape))
broadcast_to = _lift_unary(
    _t_broadcast_to, lambda a, out, ta, shape: _t_broadcast_to(ta, shape))


def _softmax_tangent(a, out, ta, axis=-1):
    inner = _t_sum(_t_mul(out, ta), axis=axis, keepdims=True)
    return _t_mul(out, _t_sub(ta, inner))


softmax = _lift_unary(_t_softmax, _softmax_tangent)


def mean(a, axis=None, keepdims=False):
    shape = value(a).shape
    n = np.prod(shape) if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def stop_gradient(x):
    """Value-transparent; blocks both reverse-mode gradients and tangents."""
    if isinstance(x, Dual):
        return Dual(_t_stop_gradient(x.primal))
    if isinstance(x, Tensor):
        return _t_stop_gradient(x)
    return Tensor(x, op="stop_gradient")


def value(x) -> np.ndarray:
    """Plain numpy value of a Tensor, Dual or array-like."""
    if isinstance(x, (Tensor, Dual)):
        return x.value
    return np.asarray(x, dtype=np.float64)


_UFUNCS = {
    np.add: add, np.subtract: sub, np.multiply: mul, np.divide: div,
    np.true_divide: div, np.negative: neg, np.matmul: matmul, np.exp: exp,
    np.log: log, np.tanh: tanh, np.sin: sin, np.cos: cos, np.sqrt: sqrt,
    np.square: square,
}


def _dispatch_ufunc(ufunc, method, inputs, kwargs):
    fn = _UFUNCS.get(ufunc)
    if fn is None or method != "__call__" or kwargs:
        raise UnsupportedPrimitive(f"numpy.{ufunc.__name__} ({method}) is not a registered primitive")
    return fn(*inputs)


# ---------------------------------------------------------------------------
# drivers


class GradTape:
    """Single-use reverse pass over the recorded graph below ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self._used = False

    def _toposort(self) -> list:
        order, seen = [], set()
        stack = [(self.output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        if self._used:
            raise RuntimeError("GradTape instances are single-use")
        self._used = True
        grads: dict[int, np.ndarray] = {}
        if not self.output.requires_grad:
            return grads
        grads[id(self.output)] = (np.ones(self.output.shape) if seed is None
                                  else _as_array(seed))
        for node in reversed(self._toposort()):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return grads


def value_and_grad(fn: Callable, params: Mapping[str, np.ndarray], *args,
                   has_aux: bool = False, **kwargs):
    """Evaluate ``fn(leaves, *args)`` and its gradient in every parameter.

    ``fn`` receives a dict of leaf Tensors keyed like ``params`` and returns
    a scalar Tensor, or ``(scalar, aux)`` when ``has_aux`` is set.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = fn(leaves, *args, **kwargs)
    aux = None
    if has_aux:
        out, aux = out
    out = _wrap(out) if not isinstance(out, Dual) else out.primal
    if out.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {out.shape}")
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteLoss(f"loss evaluated to {float(out.value)}")
    g = GradTape(out).backward()
    grads = {k: np.array(g[id(leaf)]) if id(leaf) in g else np.zeros_like(leaf.value)
             for k, leaf in leaves.items()}
    result = float(out.value)
    return (result, grads, aux) if has_aux else (result, grads)


def grad(fn: Callable, params: Mapping[str, np.ndarray], *args, **kwargs) -> dict:
    """Gradient map of a scalar program with respect to ``params``."""
    return value_and_grad(fn, params, *args, **kwargs)[1]


def grad_wrt_input(fn: Callable, x: np.ndarray, seed: np.ndarray | None = None) -> np.ndarray:
    """Vector-Jacobian product of ``fn`` at ``x`` (gradient for scalar ``fn``)."""
    leaf = Tensor(x, requires_grad=True)
    out = fn(leaf)
    out = out.primal if isinstance(out, Dual) else _wrap(out)
    g = GradTape(out).backward(seed)
    return np.array(g.get(id(leaf), np.zeros_like(leaf.value)))


@dataclass
class DualBatch:
    primal: np.ndarray
    tangent: np.ndarray


def forward_jvp(f: Callable, t, direction=1.0, *, keep_graph: bool = False):
    """Push ``t + eps * direction`` through ``f`` and return value and tangent.

    With ``keep_graph`` the result is the raw :class:`Dual` whose primal and
    tangent stay on the tape (use this inside losses).  Otherwise a
    :class:`DualBatch` of numpy arrays is returned.
    """
    t = _as_array(t)
    direction = np.broadcast_to(_as_array(direction), t.shape).copy()
    out = f(Dual(Tensor(t), Tensor(direction)))
    if not isinstance(out, Dual):
        out = Dual(_wrap(out))
    if keep_graph:
        return out
    return DualBatch(out.primal.value.copy(), out.tangent_value().copy())
