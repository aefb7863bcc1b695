"""Endpoint-parametrised flow map ``X_{s,t}(x) = x + (t - s)/(1 - s) (pi - x)``.

A *predictor* here is any callable ``f(x, s, t)`` built from
:mod:`catflowmap.autodiff` operations that returns endpoint predictions of
the same shape as ``x`` (a bound :class:`~catflowmap.predictor.Predictor`,
or a constant for tests).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .interpolant import CLAMP, ShapeMismatch, expand_time, one_minus


@dataclass(frozen=True)
class TimePair:
    """Segment start ``s`` and end ``t``; scalars or per-item ``[B]`` arrays."""

    s: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if np.any(s < 0) or np.any(t > 1) or np.any(s > t):
            raise ValueError("time pair must satisfy 0 <= s <= t <= 1")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "t", t)

    def gamma(self, clamp: float = CLAMP) -> np.ndarray:
        return (self.t - self.s) / one_minus(self.s, clamp)

    def __len__(self) -> int:
        return int(np.size(self.t))


@dataclass
class FlowMapEval:
    """Flow-map output and its ``t``-derivative, kept on the gradient tape.

    ``pi`` and ``dpi`` are the student prediction ``pi_{s,t}(x_s)`` and its
    derivative along ``t``, exposed for the endpoint-consistency losses.
    """

    x_out: ad.Tensor
    dt_out: ad.Tensor
    pi: ad.Tensor
    dpi: ad.Tensor


def flow_map_apply(x_s, pi, tp: TimePair, clamp: float = CLAMP):
    if np.shape(ad.value(x_s)) != np.shape(ad.value(pi)):
        raise ShapeMismatch(f"{np.shape(ad.value(x_s))} vs {np.shape(ad.value(pi))}")
    gamma = expand_time(tp.gamma(clamp), np.ndim(ad.value(x_s)))
    # convex form keeps both gamma = 0 and gamma = 1 bit-exact
    return (1.0 - gamma) * x_s + gamma * pi


def flow_map_with_dt(predictor: Callable, x_s, tp: TimePair, clamp: float = CLAMP) -> FlowMapEval:
    """One forward-mode pass of ``t' -> X_{s,t'}(x_s)`` at ``t' = t``."""
    s = tp.s
    ndim = np.ndim(ad.value(x_s))
    denom = expand_time(one_minus(s, clamp), ndim)
    captured = {}

    def path(t):
        pi = predictor(x_s, s, t)
        captured["pi"] = pi
        gamma = expand_time(t - s, ndim) / denom
        return (1.0 - gamma) * x_s + gamma * pi

    t = np.broadcast_to(tp.t, (np.shape(ad.value(x_s))[0],)) if ndim == 3 else tp.t
    out = ad.forward_jvp(path, t, 1.0, keep_graph=True)
    pi = captured["pi"]
    zeros = ad.Tensor(np.zeros(out.shape))
    return FlowMapEval(
        x_out=out.primal,
        dt_out=out.tangent if out.tangent is not None else zeros,
        pi=pi.primal if isinstance(pi, ad.Dual) else ad._wrap(pi),
        dpi=(pi.tangent if isinstance(pi, ad.Dual) and pi.tangent is not None else zeros),
    )


def default_teacher(predictor: Callable) -> Callable:
    """Teacher ``sg(pi_{t,t}(sg(X)))`` evaluated through the student itself."""

    def teacher(x, s, t):
        return ad.stop_gradient(predictor(ad.stop_gradient(x), s, t))

    return teacher


def lagrangian_residual(x_s, tp: TimePair, predictor: Callable,
                        teacher: Callable | None = None, clamp: float = CLAMP,
                        fm: FlowMapEval | None = None):
    """Scaled residual ``(1 - t) dX/dt - (pi_{t,t}(X) - X)`` with detached teacher.

    ``teacher`` may be a parameter-free copy of the predictor; it is always
    wrapped in ``stop_gradient`` and fed a detached ``X``.
    """
    if fm is None:
        fm = flow_map_with_dt(predictor, x_s, tp, clamp)
    teacher = teacher or predictor
    x_det = ad.value(fm.x_out)
    pi_tt = ad.stop_gradient(teacher(x_det, tp.t, tp.t))
    one_minus_t = expand_time(1.0 - tp.t, np.ndim(x_det))
    return one_minus_t * fm.dt_out - (pi_tt - fm.x_out)


def confinement_mask(x_s, x_out, tp: TimePair, tol: float = 1e-9, clamp: float = CLAMP) -> np.ndarray:
    """Per-item test that ``x_out`` lies on a segment from ``x_s`` to the simplex."""
    x_s = np.asarray(ad.value(x_s))
    x_out = np.asarray(ad.value(x_out))
    B = x_s.shape[0]
    gamma = np.broadcast_to(tp.gamma(clamp), (B,))
    zero = gamma == 0
    g = np.where(zero, 1.0, gamma).reshape((B,) + (1,) * (x_s.ndim - 1))
    y = (x_out - (1.0 - g) * x_s) / g
    # rounding in x_out is amplified by 1/gamma when recovering y
    scale = np.abs(x_s).reshape(B, -1).max(axis=1) / g.reshape(B)
    atol = (tol * np.maximum(1.0, scale)).reshape(g.shape)
    flat = lambda a: a.reshape(B, -1).all(axis=1)
    ok = flat(y >= -atol) & flat(np.abs(y.sum(axis=-1) - 1.0) <= atol[..., 0])
    same = flat(x_out == x_s)
    return np.where(zero, same, ok)


def confinement_check(x_s, x_out, tp: TimePair, tol: float = 1e-9, clamp: float = CLAMP) -> bool:
    return bool(np.all(confinement_mask(x_s, x_out, tp, tol, clamp)))
