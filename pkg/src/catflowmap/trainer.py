"""Self-distillation training loop.

Each batch is split into a diagonal part (``s = t``, endpoint cross-entropy)
and an off-diagonal part (``s < t``, distillation loss), summed with unit
weights and optimised with AdamW.  An EMA shadow of the parameters is kept
for evaluation.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .checkpoint import Checkpoint, save_checkpoint
from .data import CategoricalDataset
from .flowmap import TimePair
from .interpolant import LINEAR, interpolate, sample_prior
from .predictor import NonFiniteInput, PredictorConfig, init_params, predict, weight_net

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    warmup_steps: int = 500
    warmup_start: float = 0.001
    cosine: bool = True
    time_mu: float = -0.4
    time_sigma: float = 1.0
    uniform_time_fraction: float = 0.0
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.time_sigma < 0:
            raise ValueError("time_sigma must be >= 0")
        if not 0.0 <= self.uniform_time_fraction <= 1.0:
            raise ValueError("uniform_time_fraction must be in [0, 1]")


@dataclass
class TrainState:
    step: int
    params: dict
    m: dict
    v: dict
    ema: dict
    rng: np.random.Generator
    history: list = field(default_factory=list)


def init_state(pcfg: PredictorConfig, tcfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(pcfg, rng)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(0, params, dict(zeros), {k: v.copy() for k, v in zeros.items()},
                      {k: v.copy() for k, v in params.items()}, rng)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def sample_logit_normal(rng, mu, sigma, size=None):
    return sigmoid(mu + sigma * rng.standard_normal(size))


def sample_time_pair(rng: np.random.Generator, mu_z: float = -0.4, sigma_z: float = 1.0,
                     size: int | None = None) -> TimePair:
    """Two independent logit-normal times, ordered so that ``s <= t``."""
    a = sample_logit_normal(rng, mu_z, sigma_z, size)
    b = sample_logit_normal(rng, mu_z, sigma_z, size)
    return TimePair(np.minimum(a, b), np.maximum(a, b))


def _draw_pairs(rng, tcfg: TrainConfig, n: int) -> TimePair:
    tp = sample_time_pair(rng, tcfg.time_mu, tcfg.time_sigma, n)
    if tcfg.uniform_time_fraction <= 0:
        return tp
    # optional share drawn as t ~ U(0,1), s | t ~ U(0,t) for coverage of long jumps
    pick = rng.random(n) < tcfg.uniform_time_fraction
    t = rng.random(n)
    s = t * rng.random(n)
    return TimePair(np.where(pick, s, tp.s), np.where(pick, t, tp.t))


def split_sizes(M: int, eta: float) -> tuple[int, int]:
    m_d = int(math.floor(eta * M))
    return m_d, M - m_d


def lr_at(step: int, tcfg: TrainConfig) -> float:
    if tcfg.warmup_steps > 0 and step < tcfg.warmup_steps:
        frac = step / tcfg.warmup_steps
        return tcfg.lr * (tcfg.warmup_start + (1.0 - tcfg.warmup_start) * frac)
    if not tcfg.cosine or tcfg.steps <= tcfg.warmup_steps:
        return tcfg.lr
    prog = (step - tcfg.warmup_steps) / max(1, tcfg.steps - tcfg.warmup_steps)
    return tcfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, prog)))


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


def adamw_update(state: TrainState, grads: dict, lr: float, tcfg: TrainConfig):
    b1, b2 = tcfg.betas
    n = state.step + 1
    c1, c2 = 1.0 - b1**n, 1.0 - b2**n
    params, m, v = {}, {}, {}
    for k, p in state.params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        step = (m[k] / c1) / (np.sqrt(v[k] / c2) + tcfg.eps)
        params[k] = p * (1.0 - lr * tcfg.weight_decay) - lr * step
    return params, m, v


def _batch_loss(P, raw, pcfg, lcfg, x1_d, x0_d, t_d, x1_o, x0_o, tp):
    """Combined objective; returns (total, components) with components as Tensors."""
    net = lambda x, s, t: predict(P, x, s, t, pcfg)
    teacher = lambda x, s, t: predict(raw, x, s, t, pcfg)
    comps = {}
    total = 0.0
    if len(t_d):
        if lcfg.kind == "naive":
            items = L.fm_items(net, x0_d, x1_d, t_d)
        else:
            x_t = interpolate(LINEAR, x0_d, x1_d, t_d)
            items = L.inf_items(net, x1_d, x_t, t_d, lcfg.label_smoothing)
        comps["inf"] = ad.mean(items)
        if lcfg.weight_net:
            items = L.apply_uncertainty_weight(items, weight_net(P, t_d, t_d, pcfg))
        total = total + ad.mean(items)
    if len(tp):
        if lcfg.kind == "csd":
            items = L.csd_items(net, x0_o, x1_o, tp, lcfg.w_t, teacher, lcfg.clamp)
            comps["csd"] = ad.mean(items)
        elif lcfg.kind == "ecld":
            items, ce, td = L.ecld_items(net, x0_o, x1_o, tp, lcfg.w_t, lcfg.td_power, teacher,
                                         lcfg.clamp)
            comps["ce_ec"], comps["td"], comps["ecld"] = ad.mean(ce), ad.mean(td), ad.mean(items)
        else:
            items = L.lsd_items(net, x0_o, x1_o, tp, teacher)
            comps["lsd"] = ad.mean(items)
        if lcfg.weight_net:
            items = L.apply_uncertainty_weight(items, weight_net(P, tp.s, tp.t, pcfg))
        total = total + ad.mean(items)
    for name, c in comps.items():
        if not np.isfinite(ad.value(c)):
            raise ad.NonFiniteLoss(f"component {name} is not finite", component=name)
    return total, comps


def train_step(state: TrainState, batch: np.ndarray, pcfg: PredictorConfig,
               lcfg: L.LossConfig, tcfg: TrainConfig) -> tuple[TrainState, L.LossReport]:
    """One optimiser step on a one-hot batch ``[M, D, K]``.

    Raises :class:`~catflowmap.autodiff.NonFiniteLoss` on a non-finite loss
    or gradient.  Arrays held by ``state`` are never modified in place; its
    generator is advanced.
    """
    M, D, K = batch.shape
    m_d, m_o = split_sizes(M, lcfg.diagonal_fraction)
    rng = state.rng
    x0 = sample_prior(rng, M, D, K)
    t_d = sample_logit_normal(rng, tcfg.time_mu, tcfg.time_sigma, m_d)
    if tcfg.uniform_time_fraction > 0:
        pick = rng.random(m_d) < tcfg.uniform_time_fraction
        t_d = np.where(pick, rng.random(m_d), t_d)
    tp = _draw_pairs(rng, tcfg, m_o)
    fn = lambda P: _batch_loss(P, state.params, pcfg, lcfg, batch[:m_d], x0[:m_d], t_d,
                               batch[m_d:], x0[m_d:], tp)
    try:
        total, grads, comps = ad.value_and_grad(fn, state.params, has_aux=True)
    except NonFiniteInput as exc:
        # a diverged state feeds NaN into the teacher call
        raise ad.NonFiniteLoss(str(exc), component="state") from exc
    grads, gnorm = clip_grads(grads, tcfg.grad_clip)
    if not np.isfinite(gnorm):
        raise ad.NonFiniteLoss("gradient is not finite", component="grad")
    lr = lr_at(state.step, tcfg)
    params, m, v = adamw_update(state, grads, lr, tcfg)
    ema = ema_update(state.ema, params, tcfg.ema_decay)
    new = TrainState(state.step + 1, params, m, v, ema, rng, state.history)
    comps = {k: float(ad.value(c)) for k, c in comps.items()}
    if m_o == 0:
        comps[lcfg.kind if lcfg.kind != "naive" else "lsd"] = 0.0
    report = L.LossReport(total, comps, {"diag": m_d, "off": m_o})
    report.components["grad_norm"] = gnorm
    report.components["lr"] = lr
    return new, report


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    return {k: decay * ema[k] + (1.0 - decay) * params[k] for k in params}


def to_checkpoint(state: TrainState, config: dict) -> Checkpoint:
    return Checkpoint("predictor", config, state.step,
                      {k: v.copy() for k, v in state.params.items()},
                      {k: v.copy() for k, v in state.ema.items()})


def _check_trend(history: list[float], window: int) -> bool:
    """False when the latest trailing-window mean exceeds the previous one."""
    if len(history) < 2 * window:
        return True
    a = np.mean(history[-2 * window:-window])
    b = np.mean(history[-window:])
    return b <= a + 0.05 * abs(a)


def run_training(pcfg: PredictorConfig, tcfg: TrainConfig, lcfg: L.LossConfig,
                 dataset: CategoricalDataset, config: dict | None = None,
                 metrics_path: str | Path | None = None, out_dir: str | Path | None = None,
                 state: TrainState | None = None) -> Checkpoint:
    """Run ``tcfg.steps`` optimiser steps and return the final checkpoint."""
    if dataset.D != pcfg.D or dataset.K != pcfg.K:
        raise ValueError("dataset and model disagree on (D, K)")
    config = config or {"model": pcfg.to_dict(), "loss": asdict(lcfg), "train": asdict(tcfg)}
    state = state or init_state(pcfg, tcfg)
    data_rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    metrics = open(metrics_path, "w") if metrics_path else None
    inf_hist: list[float] = []
    t_start = time.perf_counter()
    try:
        while state.step < tcfg.steps:
            batch = dataset.sample(data_rng, tcfg.batch_size)
            try:
                state, report = train_step(state, batch, pcfg, lcfg, tcfg)
            except ad.NonFiniteLoss as exc:
                log.error("aborting at step %d: %s", state.step, exc)
                if out_dir is not None:
                    save_checkpoint(to_checkpoint(state, config), Path(out_dir) / "partial.cfm")
                raise
            if "inf" in report.components:
                inf_hist.append(report.components["inf"])
            if state.step % tcfg.log_every == 0 or state.step == tcfg.steps:
                rec = {"step": state.step, "loss": report.total, **report.components,
                       "wall_time": time.perf_counter() - t_start}
                state.history.append(rec)
                if metrics:
                    metrics.write(json.dumps(rec) + "\n")
                    metrics.flush()
                if not _check_trend(inf_hist, 10 * tcfg.log_every):
                    log.warning("endpoint loss trending up at step %d", state.step)
                log.info("step %d loss %.4f", state.step, report.total)
    finally:
        if metrics:
            metrics.close()
    return to_checkpoint(state, config)
