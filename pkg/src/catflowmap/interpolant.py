"""Affine stochastic interpolants between a Gaussian prior and one-hot data.

The default path is the straight line ``x_t = (1 - t) x0 + t x1``.  Any
``(1 - t)`` or ``(1 - s)`` that appears in a denominator is clamped below by
:data:`CLAMP` inside the helpers here, so every caller shares one rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

CLAMP = 0.05


class ShapeMismatch(ValueError):
    pass


class ScheduleSingularity(ZeroDivisionError):
    pass


def one_minus(t, clamp: float = CLAMP):
    """``max(1 - t, clamp)``; accepts arrays, Tensors and Duals.

    The clamp is applied as a constant selection so that the derivative in
    ``t`` is zero wherever the clamp is active.
    """
    if isinstance(t, (ad.Tensor, ad.Dual)):
        return ad.clip_min(1.0 - t, clamp)
    return np.maximum(1.0 - np.asarray(t, dtype=np.float64), clamp)


def expand_time(t, ndim: int = 3):
    """Reshape a per-item time ``[B]`` so it broadcasts against ``[B, D, K]``."""
    if isinstance(t, (ad.Tensor, ad.Dual)):
        if t.shape == () or len(t.shape) == ndim:
            return t
        return ad.reshape(t, t.shape + (1,) * (ndim - len(t.shape)))
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0 or t.ndim == ndim:
        return t
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


@dataclass(frozen=True)
class Schedule:
    """Interpolation coefficients ``alpha(t)`` (prior) and ``beta(t)`` (data)."""

    alpha: Callable
    beta: Callable
    alpha_dot: Callable
    beta_dot: Callable
    kind: str = "general-affine"


LINEAR = Schedule(
    alpha=lambda t: 1.0 - np.asarray(t, dtype=np.float64),
    beta=lambda t: np.asarray(t, dtype=np.float64),
    alpha_dot=lambda t: -np.ones_like(np.asarray(t, dtype=np.float64)),
    beta_dot=lambda t: np.ones_like(np.asarray(t, dtype=np.float64)),
    kind="linear",
)


def linear_as_affine() -> Schedule:
    """The straight-line path routed through the general-affine formulas."""
    return Schedule(LINEAR.alpha, LINEAR.beta, LINEAR.alpha_dot, LINEAR.beta_dot)


def trig_schedule() -> Schedule:
    """``alpha = cos(pi t / 2)``, ``beta = sin(pi t / 2)``."""
    h = np.pi / 2
    return Schedule(
        alpha=lambda t: np.cos(h * np.asarray(t, dtype=np.float64)),
        beta=lambda t: np.sin(h * np.asarray(t, dtype=np.float64)),
        alpha_dot=lambda t: -h * np.sin(h * np.asarray(t, dtype=np.float64)),
        beta_dot=lambda t: h * np.cos(h * np.asarray(t, dtype=np.float64)),
    )


def sample_prior(rng: np.random.Generator, B: int, D: int, K: int) -> np.ndarray:
    if min(B, D, K) < 1:
        raise ValueError("B, D, K must all be >= 1")
    return rng.standard_normal((B, D, K))


def interpolate(sched: Schedule, x0, x1, t):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"{x0.shape} vs {x1.shape}")
    tt = expand_time(t, x0.ndim)
    if sched.kind == "linear":
        return (1.0 - tt) * x0 + tt * x1
    return sched.alpha(tt) * x0 + sched.beta(tt) * x1


def velocity_from_endpoint(pi, x, t, sched: Schedule = LINEAR, clamp: float = CLAMP):
    """Drift implied by an endpoint (conditional mean) prediction."""
    if np.shape(ad.value(pi)) != np.shape(ad.value(x)):
        raise ShapeMismatch(f"{np.shape(ad.value(pi))} vs {np.shape(ad.value(x))}")
    tt = expand_time(t, np.ndim(ad.value(x)))
    if sched.kind == "linear":
        return (pi - x) / one_minus(tt, clamp)
    a = sched.alpha(ad.value(tt))
    if np.any(np.abs(a) < 1e-300):
        raise ScheduleSingularity("alpha(t) vanishes before t = 1")
    ratio = sched.alpha_dot(ad.value(tt)) / a
    return ratio * x + (sched.beta_dot(ad.value(tt)) - sched.beta(ad.value(tt)) * ratio) * pi


def score_from_velocity(v, x, t, clamp: float = CLAMP):
    """Score of the linear-path marginal, ``(t v - x) / (1 - t)``."""
    tt = expand_time(t, np.ndim(ad.value(x)))
    return (tt * v - x) / one_minus(tt, clamp)


def expected_interpolant_norm(d: int, t) -> float:
    """Second moment of ``x_t`` for a one-hot block of size ``d``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    t = np.asarray(t, dtype=np.float64)
    return d * (1.0 - t) ** 2 + t**2
