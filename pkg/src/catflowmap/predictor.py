"""Partial denoiser network and the learned loss-weight network.

The denoiser is an MLP over the flattened ``[D*K]`` state.  Time enters
through magnitude-preserving sinusoidal embeddings of ``s`` and
``delta = t - s``, projected separately and merged with the
magnitude-preserving sum.  Each of the ``D`` output blocks goes through a
softmax, so predictions live on the probability simplex.

Everything is written against :mod:`catflowmap.autodiff`, so the same code
serves plain evaluation (numpy params), reverse mode (leaf Tensor params)
and forward mode along ``t`` (a :class:`~catflowmap.autodiff.Dual` time).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .interpolant import expand_time, expected_interpolant_norm


class NonFiniteInput(ValueError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    D: int
    K: int
    width: int = 128
    depth: int = 2
    embed_dim: int = 32
    activation: str = "tanh"
    input_norm: bool = True
    norm_dim: str = "position"  # "position": d=K, "sequence": d=D*K
    head: str = "simplex"  # "velocity" for the unconstrained baseline
    max_freq: float = 8.0

    def __post_init__(self):
        for name in ("D", "K", "width", "depth", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even (sin/cos pairs)")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm_dim not in ("position", "sequence"):
            raise ValueError(f"unknown norm_dim {self.norm_dim!r}")
        if self.head not in ("simplex", "velocity"):
            raise ValueError(f"unknown head {self.head!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: PredictorConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n_in, W, E = cfg.D * cfg.K, cfg.width, cfg.embed_dim
    p = {
        "in.w": rng.standard_normal((n_in, W)) / np.sqrt(n_in),
        "in.b": np.zeros(W),
        "emb_s.w": rng.standard_normal((E, W)),
        "emb_d.w": rng.standard_normal((E, W)),
        "emb_s.g": np.ones(W),
        "emb_d.g": np.ones(W),
    }
    for i in range(1, cfg.depth):
        p[f"h{i}.w"] = rng.standard_normal((W, W)) / np.sqrt(W)
        p[f"h{i}.b"] = np.zeros(W)
    # zero head: the fresh model predicts the uniform distribution
    p["out.w"] = np.zeros((W, n_in))
    p["out.b"] = np.zeros(n_in)
    p["wn.w"] = rng.standard_normal((E, 1))
    p["wn.gain"] = np.zeros(())
    return p


def param_count(cfg: PredictorConfig) -> int:
    n_in, W, E = cfg.D * cfg.K, cfg.width, cfg.embed_dim
    return (n_in * W + W) + 2 * E * W + 2 * W + (cfg.depth - 1) * (W * W + W) + (W * n_in + n_in) + E + 1


def frequencies(embed_dim: int, max_freq: float = 8.0) -> np.ndarray:
    # lowest frequency below 1/2 so that u=0 and u=1 embed differently
    return np.geomspace(0.25, max_freq, embed_dim // 2)


def sinusoidal(u, embed_dim: int, max_freq: float = 8.0):
    """``sqrt(2) [sin(2 pi f u), cos(2 pi f u)]``; squared norm is ``embed_dim``."""
    u = _as_batch(u)
    f = frequencies(embed_dim, max_freq)
    arg = ad.reshape(u, u.shape + (1,)) * (2.0 * np.pi * f)
    return ad.concat([ad.sin(arg), ad.cos(arg)], axis=-1) * np.sqrt(2.0)


def mp_linear(x, w):
    """Linear map whose weight columns are renormalised to unit length."""
    norm = ad.sqrt(ad.sum_(ad.square(w), axis=0, keepdims=True) + 1e-12)
    return ad.matmul(x, w / norm)


def mp_sum(a, b):
    return (a + b) / np.sqrt(2.0)


def time_embed(u, params, key: str, cfg: PredictorConfig):
    # unit-norm projection followed by a learned per-unit gain, so the net
    # can turn down its sensitivity to either time input
    return mp_linear(sinusoidal(u, cfg.embed_dim, cfg.max_freq), params[key + ".w"]) * params[key + ".g"]


def input_normalize(x, s, d: int, enabled: bool = True):
    """Scale ``x`` to unit expected second moment per block at segment start ``s``."""
    if not enabled:
        return x
    scale = np.sqrt(expected_interpolant_norm(d, expand_time(ad.value(s), np.ndim(ad.value(x)))))
    return x / scale


def _as_batch(u):
    if isinstance(u, (ad.Tensor, ad.Dual)):
        return u if u.shape != () else ad.reshape(u, (1,))
    return np.atleast_1d(np.asarray(u, dtype=np.float64))


def _broadcast_time(u, B: int):
    u = _as_batch(u)
    if u.shape[0] == B:
        return u
    if isinstance(u, (ad.Tensor, ad.Dual)):
        return ad.broadcast_to(u, (B,))
    return np.broadcast_to(u, (B,))


def predict(params, x, s, t, cfg: PredictorConfig):
    """Endpoint prediction ``pi_{s,t}(x)`` of shape ``[B, D, K]``.

    ``s`` and ``t`` are scalars or per-item arrays; ``t`` may be a Dual to
    obtain the derivative along ``t``.
    """
    xv = ad.value(x)
    if not np.all(np.isfinite(xv)):
        raise NonFiniteInput("predictor input contains NaN or Inf")
    B, D, K = xv.shape
    s = _broadcast_time(s, B)
    t = _broadcast_time(t, B)
    act = ad.tanh if cfg.activation == "tanh" else ad.relu

    d = K if cfg.norm_dim == "position" else D * K
    h_in = ad.reshape(input_normalize(x, s, d, cfg.input_norm), (B, D * K))
    cond = mp_sum(time_embed(s, params, "emb_s", cfg),
                  time_embed(t - s, params, "emb_d", cfg))
    h = act(ad.matmul(h_in, params["in.w"]) + params["in.b"] + cond)
    for i in range(1, cfg.depth):
        h = act(ad.matmul(h, params[f"h{i}.w"]) + params[f"h{i}.b"] + cond)
    logits = ad.reshape(ad.matmul(h, params["out.w"]) + params["out.b"], (B, D, K))
    if cfg.head == "velocity":
        return logits
    return ad.softmax(logits, axis=-1)


def weight_net(params, s, t, cfg: PredictorConfig):
    """Scalar log-variance style weight ``w(s, t)`` per item, shape ``[B]``."""
    h = mp_sum(sinusoidal(s, cfg.embed_dim, cfg.max_freq),
               sinusoidal(t, cfg.embed_dim, cfg.max_freq))
    out = mp_linear(h, params["wn.w"])
    return ad.reshape(out, (out.shape[0],)) * params["wn.gain"]


class Predictor:
    """Config plus parameters; calling it evaluates :func:`predict`.

    ``bind`` swaps in another parameter set (e.g. leaf Tensors during a
    gradient computation or the EMA shadow) without copying the config.
    """

    def __init__(self, cfg: PredictorConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))

    def __call__(self, x, s, t):
        return predict(self.params, x, s, t, self.cfg)

    def bind(self, params) -> "Predictor":
        return Predictor(self.cfg, params)

    def weight(self, s, t):
        return weight_net(self.params, s, t, self.cfg)

    def numpy(self, x, s, t) -> np.ndarray:
        return ad.value(self(x, s, t))
