"""Few-step flow-map sampling, Euler and Euler-Maruyama integration.

Samplers take a *model*: any callable ``model(x, s, t)`` returning endpoint
predictions for numpy inputs (a :class:`~catflowmap.predictor.Predictor`
works directly).  Randomness comes from independent streams spawned
from one seed: the prior draw, the SDE noise, the final discretisation and
particle resampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .interpolant import CLAMP, one_minus, sample_prior, score_from_velocity


class DegenerateSlice(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        if k.ndim != 1 or len(k) < 2 or k[0] != 0.0 or k[-1] != 1.0 or np.any(np.diff(k) <= 0):
            raise ValueError("grid must be strictly increasing from exactly 0 to exactly 1")
        object.__setattr__(self, "knots", k)

    @classmethod
    def uniform(cls, n_steps: int) -> "TimeGrid":
        if n_steps < 1:
            raise ValueError("need at least one step")
        k = np.arange(n_steps + 1) / n_steps
        k[-1] = 1.0
        return cls(k)

    @property
    def n_steps(self) -> int:
        return len(self.knots) - 1

    def steps(self):
        return zip(self.knots[:-1], self.knots[1:])


@dataclass
class SampleOutput:
    hard: np.ndarray  # one-hot [B, D, K]
    soft: np.ndarray  # final continuous state
    mode: str
    trajectory: list | None = None

    @property
    def states(self) -> np.ndarray:
        return self.hard.argmax(axis=-1)


def make_streams(seed) -> dict[str, np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    names = ("prior", "noise", "discrete", "resample")
    return {n: np.random.default_rng(c) for n, c in zip(names, ss.spawn(len(names)))}


def _call(model: Callable, x, s, t) -> np.ndarray:
    B = x.shape[0]
    return ad.value(model(x, np.full(B, s), np.full(B, t)))


def discretize(soft: np.ndarray, mode: str = "argmax", rng: np.random.Generator | None = None) -> np.ndarray:
    """One-hot projection of each ``[..., K]`` slice.

    ``argmax`` breaks ties toward the lowest index.  ``categorical`` draws an
    index with probability proportional to the slice after zeroing tiny
    negative entries.
    """
    soft = np.asarray(soft, dtype=np.float64)
    K = soft.shape[-1]
    if mode == "argmax":
        return np.eye(K)[soft.argmax(axis=-1)]
    if mode != "categorical":
        raise ValueError(f"unknown discretisation mode {mode!r}")
    if np.any(soft < -1e-9):
        raise DegenerateSlice("slice has negative entries below -1e-9")
    p = np.clip(soft, 0.0, None)
    total = p.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateSlice("slice sums to zero")
    cdf = np.cumsum(p / total, axis=-1)
    u = (rng or np.random.default_rng()).random(soft.shape[:-1] + (1,))
    idx = np.minimum((u >= cdf).sum(axis=-1), K - 1)
    return np.eye(K)[idx]


def _finish(x, mode, streams, trajectory=None) -> SampleOutput:
    return SampleOutput(discretize(x, mode, streams["discrete"]), x, mode, trajectory)


def sample_flowmap(model: Callable, seed, grid: TimeGrid, B: int, D: int, K: int,
                   mode: str = "argmax", clamp: float = CLAMP,
                   keep_trajectory: bool = False) -> SampleOutput:
    """Jump along ``grid`` with the learned flow map; one network call per step."""
    streams = make_streams(seed)
    x = sample_prior(streams["prior"], B, D, K)
    traj = [x] if keep_trajectory else None
    for t0, t1 in grid.steps():
        pi = _call(model, x, t0, t1)
        # the final jump lands exactly on the prediction
        gamma = 1.0 if t1 == 1.0 else (t1 - t0) / one_minus(t0, clamp)
        x = (1.0 - gamma) * x + gamma * pi
        if keep_trajectory:
            traj.append(x)
    return _finish(x, mode, streams, traj)


def euler_step(model, x, t0, t1, clamp=CLAMP):
    v = (_call(model, x, t0, t0) - x) / one_minus(t0, clamp)
    return x + (t1 - t0) * v


def sample_euler(model: Callable, seed, grid: TimeGrid | None, B: int, D: int, K: int,
                 mode: str = "argmax", clamp: float = CLAMP) -> SampleOutput:
    """Integrate the instantaneous velocity ``(pi_{t,t}(x) - x) / (1 - t)``.

    ``grid=None`` takes zero steps and discretises the prior draw.
    """
    streams = make_streams(seed)
    x = sample_prior(streams["prior"], B, D, K)
    if grid is not None:
        for t0, t1 in grid.steps():
            x = euler_step(model, x, t0, t1, clamp)
    return _finish(x, mode, streams)


def default_sigma(sigma0: float = 1.0) -> Callable[[float], float]:
    return lambda t: sigma0 * (1.0 - t)


def sde_drift(model, x, t, sigma_t, clamp=CLAMP, score_shift=None):
    """``v + sigma^2/2 * score``, with an optional additive score term."""
    v = (_call(model, x, t, t) - x) / one_minus(t, clamp)
    if sigma_t == 0.0:
        return v
    score = score_from_velocity(v, x, t, clamp)
    if score_shift is not None:
        score = score + score_shift
    return v + 0.5 * sigma_t**2 * score


def sample_sde(model: Callable, seed, grid: TimeGrid, B: int, D: int, K: int,
               sigma: Callable[[float], float] | None = None, mode: str = "argmax",
               clamp: float = CLAMP, keep_trajectory: bool = False) -> SampleOutput:
    """Euler-Maruyama for ``dx = [v + sigma^2/2 s] dt + sigma dW``.

    The last step is taken without noise so the endpoint is deterministic
    given the state at the last interior knot.
    """
    sigma = sigma or default_sigma()
    streams = make_streams(seed)
    x = sample_prior(streams["prior"], B, D, K)
    traj = [x] if keep_trajectory else None
    last = grid.n_steps - 1
    for i, (t0, t1) in enumerate(grid.steps()):
        sig = 0.0 if i == last else float(sigma(t0))
        dt = t1 - t0
        x = x + dt * sde_drift(model, x, t0, sig, clamp)
        if sig != 0.0:
            x = x + sig * np.sqrt(dt) * streams["noise"].standard_normal(x.shape)
        if keep_trajectory:
            traj.append(x)
    return _finish(x, mode, streams, traj)


SAMPLERS = {"flowmap": sample_flowmap, "euler": sample_euler, "sde": sample_sde}
