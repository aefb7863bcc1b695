"""Reward-tilted sampling with lookahead and sequential Monte Carlo.

The SDE sampler's score is shifted by ``t * grad_x r(lookahead(x))`` where
the lookahead estimates the trajectory endpoint with the flow map
``X_{t,1}``, the denoiser ``pi_{t,t}``, or not at all.  Particles carry
log-weights updated by the change in the potential ``t * r(lookahead(x))``
between knots and are resampled systematically when the effective sample
size drops below a fraction of the ensemble size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from . import autodiff as ad
from .checkpoint import Checkpoint
from .flowmap import TimePair, flow_map_apply
from .interpolant import CLAMP, one_minus, sample_prior, score_from_velocity
from .sampler import SampleOutput, TimeGrid, _call, discretize, make_streams, sde_drift


class AllWeightsDegenerate(FloatingPointError):
    pass


class RewardModel(Protocol):
    def evaluate(self, x: np.ndarray) -> np.ndarray: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...


class ZeroReward:
    def evaluate(self, x):
        return np.zeros(x.shape[0])

    def gradient(self, x):
        return np.zeros_like(x)


@dataclass
class LinearReward:
    a: np.ndarray  # [D, K]

    def evaluate(self, x):
        return np.einsum("bdk,dk->b", x, self.a)

    def gradient(self, x):
        return np.broadcast_to(self.a, x.shape).copy()


@dataclass
class QuadraticReward:
    """``r(x) = -||x - c||^2``."""

    c: np.ndarray

    def evaluate(self, x):
        return -((x - self.c) ** 2).sum(axis=(1, 2))

    def gradient(self, x):
        return -2.0 * (x - self.c)


@dataclass
class LogisticReward:
    """``scale * log p(target | x)`` under a multinomial logistic model."""

    weight: np.ndarray  # [D*K, C]
    bias: np.ndarray  # [C]
    target: int = 0
    scale: float = 1.0

    def _logits(self, x):
        return x.reshape(x.shape[0], -1) @ self.weight + self.bias

    def evaluate(self, x):
        return self.scale * log_softmax(self._logits(x), axis=1)[:, self.target]

    def gradient(self, x):
        p = softmax(self._logits(x), axis=1)
        g = self.weight[:, self.target][None, :] - p @ self.weight.T
        return self.scale * g.reshape(x.shape)

    def predict_proba(self, x):
        return softmax(self._logits(x), axis=1)

    def to_checkpoint(self) -> Checkpoint:
        D_K, C = self.weight.shape
        cfg = {"model": {"type": "logistic", "inputs": D_K, "classes": C},
               "reward": {"target": self.target, "scale": self.scale}}
        return Checkpoint("reward", cfg, 0, {"weight": self.weight, "bias": self.bias})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LogisticReward":
        if ckpt.kind != "reward":
            raise ValueError(f"expected a reward checkpoint, got {ckpt.kind!r}")
        r = ckpt.config.get("reward", {})
        return cls(ckpt.params["weight"], ckpt.params["bias"], int(r.get("target", 0)),
                   float(r.get("scale", 1.0)))


def fit_logistic(x: np.ndarray, labels: np.ndarray, n_classes: int = 2, l2: float = 1e-3,
                 target: int = 0) -> LogisticReward:
    """Fit a multinomial logistic classifier on clean one-hot data."""
    X = x.reshape(x.shape[0], -1)
    n, d = X.shape
    Y = np.eye(n_classes)[labels]

    def objective(theta):
        W = theta[: d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes:]
        logits = X @ W + b
        logp = log_softmax(logits, axis=1)
        loss = -(Y * logp).sum() / n + 0.5 * l2 * (W**2).sum()
        r = (np.exp(logp) - Y) / n
        gW = X.T @ r + l2 * W
        return loss, np.concatenate([gW.ravel(), r.sum(axis=0)])

    theta0 = np.zeros(d * n_classes + n_classes)
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B")
    W = res.x[: d * n_classes].reshape(d, n_classes)
    return LogisticReward(W, res.x[d * n_classes:], target)


def ste_reward(reward: RewardModel, soft: np.ndarray):
    """Reward of the argmax-discretised state; gradient passed straight to ``soft``."""
    hard = discretize(soft, "argmax")
    return reward.evaluate(hard), reward.gradient(hard)


def lookahead_fn(model: Callable, t: float, mode: str, clamp: float = CLAMP) -> Callable:
    """Endpoint estimate as a differentiable function of the current state."""
    if mode == "none":
        return lambda x: x
    if mode == "denoiser":
        def denoise(x):
            B = ad.value(x).shape[0]
            return model(x, np.full(B, t), np.full(B, t))
        return denoise
    if mode == "flowmap":
        def jump(x):
            B = ad.value(x).shape[0]
            pi = model(x, np.full(B, t), np.ones(B))
            return flow_map_apply(x, pi, TimePair(np.full(B, t), np.ones(B)), clamp)
        return jump
    raise ValueError(f"unknown lookahead {mode!r}")


def reward_and_grad(model, x, t, reward: RewardModel, lookahead: str = "flowmap",
                    ste: bool = True, clamp: float = CLAMP):
    """``r(lookahead(x))`` and its gradient with respect to ``x``."""
    f = lookahead_fn(model, t, lookahead, clamp)
    leaf = ad.Tensor(x, requires_grad=True)
    X = f(leaf)
    X = X if isinstance(X, ad.Tensor) else ad.Tensor(X)
    if ste:
        r, g = ste_reward(reward, X.value)
    else:
        r, g = reward.evaluate(X.value), reward.gradient(X.value)
    if X is leaf:
        return r, np.array(g, dtype=np.float64)
    grads = ad.GradTape(X).backward(g)
    return r, grads.get(id(leaf), np.zeros_like(x))


def tilted_score(model, x, t, reward: RewardModel, lookahead: str = "flowmap",
                 ste: bool = True, clamp: float = CLAMP) -> np.ndarray:
    v = (_call(model, x, t, t) - x) / one_minus(t, clamp)
    score = score_from_velocity(v, x, t, clamp)
    if t == 0:
        return score
    _, g = reward_and_grad(model, x, t, reward, lookahead, ste, clamp)
    return score + t * g


def systematic_resample(weights: np.ndarray, u: float) -> np.ndarray:
    """Ancestor indices for one uniform offset ``u`` in ``[0, 1)``."""
    P = len(weights)
    cdf = np.cumsum(weights / np.sum(weights))
    cdf[-1] = 1.0
    positions = (np.arange(P) + u) / P
    return np.minimum(np.searchsorted(cdf, positions, side="right"), P - 1)


def effective_sample_size(log_w: np.ndarray) -> np.ndarray:
    w = softmax(log_w, axis=-1)
    return 1.0 / (w**2).sum(axis=-1)


@dataclass
class SMCConfig:
    sigma0: float = 1.0
    lookahead: str = "flowmap"
    ste: bool = True
    ess_fraction: float = 0.5
    mode: str = "argmax"
    clamp: float = CLAMP


@dataclass
class ParticleEnsemble:
    """``E`` independent ensembles of ``P`` particles, stored flat.

    ``states`` is ``[E*P, D, K]``; ``log_weights`` is ``[E, P]``;
    ``potential`` and ``grad`` cache ``t * r`` and its gradient at ``t``.
    """

    states: np.ndarray
    log_weights: np.ndarray
    t: float
    potential: np.ndarray
    grad: np.ndarray
    n_resamples: int = 0

    @property
    def P(self) -> int:
        return self.log_weights.shape[1]


def init_ensemble(x0: np.ndarray, P: int) -> ParticleEnsemble:
    N = x0.shape[0]
    if N % P:
        raise ValueError("number of particles must be a multiple of P")
    return ParticleEnsemble(x0, np.zeros((N // P, P)), 0.0, np.zeros(N), np.zeros_like(x0))


def _potential(model, x, t, reward, cfg: SMCConfig):
    r, g = reward_and_grad(model, x, t, reward, cfg.lookahead, cfg.ste, cfg.clamp)
    return t * r, g


def smc_step(ens: ParticleEnsemble, model, t_from: float, t_to: float, reward: RewardModel,
             cfg: SMCConfig, noise_rng: np.random.Generator, resample_rng: np.random.Generator,
             final: bool = False) -> ParticleEnsemble:
    """Tilted Euler-Maruyama move, weight update, then resampling if ESS is low."""
    x = ens.states
    sig = 0.0 if final else float(cfg.sigma0 * (1.0 - t_from))
    shift = t_from * ens.grad if t_from > 0 else None
    dt = t_to - t_from
    x = x + dt * sde_drift(model, x, t_from, sig, cfg.clamp, score_shift=shift)
    if sig != 0.0:
        x = x + sig * np.sqrt(dt) * noise_rng.standard_normal(x.shape)
    pot, grad = _potential(model, x, t_to, reward, cfg)
    E, P = ens.log_weights.shape
    log_w = ens.log_weights + (pot - ens.potential).reshape(E, P)
    if not np.all(np.isfinite(log_w.max(axis=1))):
        raise AllWeightsDegenerate("an ensemble has no finite log-weight")
    out = ParticleEnsemble(x, log_w, t_to, pot, grad, ens.n_resamples)
    if P == 1:
        out.log_weights = np.zeros_like(log_w)
        return out
    ess = effective_sample_size(log_w)
    low = np.flatnonzero(ess < cfg.ess_fraction * P)
    if len(low) == 0:
        return out
    idx = np.arange(E * P).reshape(E, P)
    w = softmax(log_w, axis=1)
    for e in low:
        idx[e] = e * P + systematic_resample(w[e], resample_rng.random())
    flat = idx.ravel()
    out.states, out.potential, out.grad = x[flat], pot[flat], grad[flat]
    out.log_weights = log_w.copy()
    out.log_weights[low] = 0.0
    out.n_resamples += len(low)
    return out


@dataclass
class GuidedOutput(SampleOutput):
    rewards: np.ndarray | None = None
    log_weights: np.ndarray | None = None
    n_resamples: int = 0


def guided_sample(model, reward: RewardModel, grid: TimeGrid, P: int, n_samples: int,
                  D: int, K: int, cfg: SMCConfig | None = None, seed=0) -> GuidedOutput:
    """Run ``ceil(n_samples / P)`` independent SMC ensembles of ``P`` particles."""
    cfg = cfg or SMCConfig()
    if P < 1:
        raise ValueError("P must be >= 1")
    streams = make_streams(seed)
    E = -(-n_samples // P)
    x = sample_prior(streams["prior"], E * P, D, K)
    ens = init_ensemble(x, P)
    last = grid.n_steps - 1
    for i, (t0, t1) in enumerate(grid.steps()):
        ens = smc_step(ens, model, t0, t1, reward, cfg, streams["noise"], streams["resample"],
                       final=(i == last))
    soft = ens.states[:n_samples]
    hard = discretize(soft, cfg.mode, streams["discrete"])
    return GuidedOutput(hard, soft, cfg.mode, None, rewards=reward.evaluate(hard),
                        log_weights=ens.log_weights, n_resamples=ens.n_resamples)
