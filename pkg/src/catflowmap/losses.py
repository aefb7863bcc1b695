"""Training objectives for categorical flow maps.

Per-item quantities are summed over categories and averaged over the ``D``
positions; batch losses are means over items.  The same convention is used
for every loss, so ratios between them (and the ECLD bound) are unaffected.

``net`` arguments are predictor callables ``f(x, s, t)``.  ``teacher`` is an
optional parameter-free copy used for the stop-gradient branch; when it is
omitted the student is evaluated and detached.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .flowmap import TimePair, flow_map_with_dt, lagrangian_residual
from .interpolant import CLAMP, LINEAR, expand_time, interpolate, one_minus

PROB_FLOOR = 1e-12
W_MODES = ("one", "inv1mt", "inv1mt_sq")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "ecld"  # csd | ecld | naive
    w_t: str = "one"
    label_smoothing: float = 0.1
    diagonal_fraction: float = 0.75
    td_power: str = "gamma_sq"  # gamma_sq | gamma
    weight_net: bool = False
    clamp: float = CLAMP

    def __post_init__(self):
        if self.kind not in ("csd", "ecld", "naive"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.w_t not in W_MODES:
            raise ValueError(f"unknown w_t mode {self.w_t!r}")
        if self.td_power not in ("gamma_sq", "gamma"):
            raise ValueError(f"unknown td_power {self.td_power!r}")
        if not 0.0 < self.diagonal_fraction <= 1.0:
            raise ValueError("diagonal_fraction must be in (0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not 0.0 <= self.clamp < 1.0:
            raise ValueError("clamp must be in [0, 1)")


@dataclass
class LossReport:
    total: float
    components: dict[str, float] = field(default_factory=dict)
    sizes: dict[str, int] = field(default_factory=dict)


def time_weight(t, mode: str, clamp: float = CLAMP) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if mode == "one":
        return np.ones_like(t)
    c = one_minus(t, clamp)
    if mode == "inv1mt":
        return 1.0 / c
    if mode == "inv1mt_sq":
        return 1.0 / c**2
    raise ValueError(f"unknown w_t mode {mode!r}")


def _per_item(x, D: int):
    """Sum over (D, K), divide by D: ``[B, D, K] -> [B]``."""
    return ad.sum_(x, axis=(1, 2)) / float(D)


def _xs(x0, x1, s):
    return interpolate(LINEAR, x0, x1, s)


def smooth_targets(x1, label_smoothing: float) -> np.ndarray:
    K = x1.shape[-1]
    return (1.0 - label_smoothing) * x1 + label_smoothing / K


def cross_entropy_items(p, q):
    """``CE(p, q) = -sum p log q`` per item; ``p`` is a fixed target."""
    p = ad.value(p)
    D = p.shape[1]
    return -_per_item(p * ad.log(ad.clip_min(q, PROB_FLOOR)), D)


def _entropy_items(p: np.ndarray) -> np.ndarray:
    plogp = np.where(p > 0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0)
    return -plogp.sum(axis=(1, 2)) / p.shape[1]


def kl_items(p, q):
    """``KL(p || q)`` per item with ``p`` fixed (teacher) and ``q`` the student."""
    return cross_entropy_items(p, q) - _entropy_items(ad.value(p))


# ---------------------------------------------------------------------------
# per-item losses (shape [B]); the public functions below average them


def inf_items(net: Callable, x1, x_t, t, label_smoothing: float = 0.0):
    pi = net(x_t, t, t)
    return cross_entropy_items(smooth_targets(np.asarray(x1), label_smoothing), pi)


def _teacher_at(fm, tp, net, teacher):
    teacher = teacher or net
    return ad.value(ad.stop_gradient(teacher(ad.value(fm.x_out), tp.t, tp.t)))


def csd_items(net, x0, x1, tp: TimePair, w_mode: str = "one", teacher=None,
              clamp: float = CLAMP):
    x_s = _xs(x0, x1, tp.s)
    R = lagrangian_residual(x_s, tp, net, teacher=teacher, clamp=clamp)
    w = time_weight(tp.t, w_mode, clamp)
    return w * _per_item(ad.square(R), x_s.shape[1])


def ec_items(net, x0, x1, tp, w_mode="inv1mt_sq", teacher=None, clamp=CLAMP, fm=None):
    x_s = _xs(x0, x1, tp.s)
    fm = fm or flow_map_with_dt(net, x_s, tp, clamp)
    target = _teacher_at(fm, tp, net, teacher)
    return time_weight(tp.t, w_mode, clamp) * kl_items(target, fm.pi)


def td_items(net, x0, x1, tp, power="gamma_sq", clamp=CLAMP, fm=None):
    x_s = _xs(x0, x1, tp.s)
    fm = fm or flow_map_with_dt(net, x_s, tp, clamp)
    g = tp.gamma(clamp)
    g = g**2 if power == "gamma_sq" else g
    return g * _per_item(ad.square(fm.dpi), x_s.shape[1])


def ecld_items(net, x0, x1, tp, w_mode="one", td_power="gamma_sq", teacher=None,
               clamp=CLAMP):
    x_s = _xs(x0, x1, tp.s)
    fm = flow_map_with_dt(net, x_s, tp, clamp)
    target = _teacher_at(fm, tp, net, teacher)
    ce = time_weight(tp.t, w_mode, clamp) * cross_entropy_items(target, fm.pi)
    td = td_items(net, x0, x1, tp, td_power, clamp, fm=fm)
    return 4.0 * ce + 2.0 * td, ce, td


def fm_items(vnet, x0, x1, t):
    """Flow-matching regression of ``v_{t,t}(x_t)`` onto ``x1 - x0``."""
    x_t = _xs(x0, x1, t)
    v = vnet(x_t, t, t)
    return _per_item(ad.square(v - (np.asarray(x1) - np.asarray(x0))), x_t.shape[1])


def lsd_items(vnet, x0, x1, tp, teacher=None):
    """Lagrangian self-distillation for an unconstrained velocity map.

    ``X_{s,t}(x) = x + (t - s) v_{s,t}(x)``; residual ``dX/dt - v_{t,t}(X)``.
    """
    x_s = _xs(x0, x1, tp.s)
    ndim = x_s.ndim

    def path(t):
        return x_s + expand_time(t - tp.s, ndim) * vnet(x_s, tp.s, t)

    t = np.broadcast_to(tp.t, (x_s.shape[0],))
    out = ad.forward_jvp(path, t, 1.0, keep_graph=True)
    dX = out.tangent if out.tangent is not None else ad.Tensor(np.zeros(out.shape))
    teacher = teacher or vnet
    v_tt = ad.value(ad.stop_gradient(teacher(out.primal.value, tp.t, tp.t)))
    return _per_item(ad.square(dX - v_tt), x_s.shape[1])


# ---------------------------------------------------------------------------
# public batch losses


def loss_inf(net, x1, x_t, t, label_smoothing: float = 0.0):
    return ad.mean(inf_items(net, x1, x_t, t, label_smoothing))


def loss_csd(net, x0, x1, tp, w_mode="one", teacher=None, clamp=CLAMP):
    return ad.mean(csd_items(net, x0, x1, tp, w_mode, teacher, clamp))


def loss_ec(net, x0, x1, tp, w_mode="inv1mt_sq", teacher=None, clamp=CLAMP):
    return ad.mean(ec_items(net, x0, x1, tp, w_mode, teacher, clamp))


def loss_td(net, x0, x1, tp, power="gamma_sq", clamp=CLAMP):
    return ad.mean(td_items(net, x0, x1, tp, power, clamp))


def loss_ecld(net, x0, x1, tp, w_mode="one", td_power="gamma_sq", teacher=None, clamp=CLAMP):
    return ad.mean(ecld_items(net, x0, x1, tp, w_mode, td_power, teacher, clamp)[0])


def loss_naive_lsd(vnet, x0, x1, tp, teacher=None):
    return ad.mean(lsd_items(vnet, x0, x1, tp, teacher)) + ad.mean(fm_items(vnet, x0, x1, tp.t))


def apply_uncertainty_weight(loss, w):
    """``exp(-w) * loss + w``; minimised over ``w`` at ``w = log(loss)``."""
    return ad.exp(-w) * loss + w


@dataclass
class BoundCheck:
    lcsd: float
    lec: float
    ltd: float
    slack: float
    decomposition_error: float
    drift_gap: float  # |L_TD - E[w ||b||^2]|, zero under the gamma^2 convention


def check_ecld_bound(net, x0, x1, tp: TimePair, teacher=None,
                     td_power: str = "gamma_sq") -> BoundCheck:
    """Evaluate both sides of ``L_CSD <= 4 L_EC + 2 L_TD``.

    Conventions are pinned to the inequality's own: no denominator clamp,
    ``w_t = (1 - t)^-2`` on the scaled residual and on the KL term, and a
    ``gamma^2`` drift weight.  Requires ``t < 1``.

    The residual splits as ``a + b`` with ``a = pi_{s,t} - pi_{t,t}(X)`` and
    ``b = (1 - t) gamma d_t pi``; ``w ||b||^2`` is exactly the drift term, so
    ``drift_gap`` exposes a wrong ``td_power`` even where the inequality
    still holds.
    """
    if np.any(tp.t >= 1.0):
        raise ValueError("bound check needs t < 1")
    x_s = _xs(x0, x1, tp.s)
    D = x_s.shape[1]
    fm = flow_map_with_dt(net, x_s, tp, clamp=0.0)
    target = _teacher_at(fm, tp, net, teacher)
    R = lagrangian_residual(x_s, tp, net, teacher=lambda *a: target, clamp=0.0, fm=fm)
    w = 1.0 / (1.0 - tp.t) ** 2
    lcsd = float(np.mean(w * ad.value(_per_item(ad.square(R), D))))
    lec = float(np.mean(w * ad.value(kl_items(target, fm.pi))))
    gamma = tp.gamma(0.0)
    g = gamma**2 if td_power == "gamma_sq" else gamma
    ltd = float(np.mean(g * ad.value(_per_item(ad.square(fm.dpi), D))))
    a = ad.value(fm.pi) - target
    b = expand_time((1.0 - tp.t) * gamma, 3) * ad.value(fm.dpi)
    err = float(np.max(np.abs(ad.value(R) - a - b)))
    drift = float(np.mean(w * (b**2).sum(axis=-1).mean(axis=-1)))
    return BoundCheck(lcsd, lec, ltd, 4.0 * lec + 2.0 * ltd - lcsd, err, abs(ltd - drift))
