"""Randomised invariant suites run by ``catflowmap selfcheck``.

Each suite returns ``(passed, detail)``.  Nets are small MLPs with all
parameters perturbed away from initialisation so that the zero output head
does not make every check trivial.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .flowmap import TimePair, confinement_mask, flow_map_apply
from .interpolant import expected_interpolant_norm, interpolate, sample_prior, LINEAR
from .losses import check_ecld_bound, kl_items
from .predictor import Predictor, PredictorConfig, init_params


def random_predictor(rng: np.random.Generator, D: int = 3, K: int = 3, width: int = 16,
                     scale: float = 0.5, activation: str = "tanh") -> Predictor:
    cfg = PredictorConfig(D=D, K=K, width=width, depth=2, embed_dim=8, activation=activation)
    params = init_params(cfg, rng)
    params = {k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()}
    return Predictor(cfg, params)


def _batch(rng, B, D, K):
    x0 = sample_prior(rng, B, D, K)
    x1 = np.eye(K)[rng.integers(0, K, size=(B, D))]
    return x0, x1


def suite_ecld_bound(rng, draws: int = 1000, td_power: str = "gamma_sq"):
    worst_slack, worst_dec, worst_gap = np.inf, 0.0, 0.0
    for _ in range(draws):
        net = random_predictor(rng)
        x0, x1 = _batch(rng, 4, 3, 3)
        a, b = rng.uniform(0.0, 0.98, size=(2, 4))
        tp = TimePair(np.minimum(a, b), np.maximum(a, b))
        chk = check_ecld_bound(net, x0, x1, tp, td_power=td_power)
        worst_slack = min(worst_slack, chk.slack)
        worst_dec = max(worst_dec, chk.decomposition_error)
        worst_gap = max(worst_gap, chk.drift_gap / max(1.0, chk.ltd))
    ok = worst_slack >= -1e-8 and worst_dec < 1e-9 and worst_gap < 1e-9
    return ok, f"min slack {worst_slack:.3e}, decomposition {worst_dec:.1e}, drift gap {worst_gap:.1e}"


def suite_pinsker(rng, draws: int = 2000):
    p = rng.dirichlet(np.ones(5) * 0.5, size=draws)[:, None, :]
    q = rng.dirichlet(np.ones(5) * 0.5, size=draws)[:, None, :]
    kl = ad.value(kl_items(p, q))
    l1 = np.abs(p - q).sum(axis=-1)[:, 0]
    gap = float(np.min(kl - 0.5 * l1**2))
    return gap >= -1e-12, f"min KL - l1^2/2 = {gap:.3e}"


def suite_jvp_fd(rng, draws: int = 20, eps: float = 1e-5):
    worst = 0.0
    for _ in range(draws):
        net = random_predictor(rng)
        x = rng.standard_normal((2, 3, 3))
        s = rng.uniform(0, 0.4, 2)
        t = rng.uniform(0.45, 0.9, 2)
        f = lambda u: net(x, s, u)
        out = ad.forward_jvp(f, t)
        fd = (ad.value(f(t + eps)) - ad.value(f(t - eps))) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(out.tangent - fd)) / max(1e-3, np.max(np.abs(fd)))))
    return worst < 1e-5, f"max rel err {worst:.2e}"


def suite_confinement(rng, trajectories: int = 10_000, steps: int = 4):
    net = random_predictor(rng)
    x = sample_prior(rng, trajectories, 3, 3)
    knots = np.linspace(0.0, 1.0, steps + 1)
    bad = 0
    for t0, t1 in zip(knots[:-1], knots[1:]):
        tp = TimePair(np.full(trajectories, t0), np.full(trajectories, t1))
        out = ad.value(flow_map_apply(x, net(x, tp.s, tp.t), tp))
        bad += int(np.sum(~confinement_mask(x, out, tp)))
        x = out
    return bad == 0, f"{bad} violations over {trajectories * steps} knots"


def suite_identity(rng, draws: int = 50):
    net = random_predictor(rng)
    x = rng.standard_normal((draws, 3, 3))
    t = rng.uniform(0, 1, draws)
    tp = TimePair(t, t)
    out = ad.value(flow_map_apply(x, net(x, t, t), tp))
    return bool(np.array_equal(out, x)), "X_{t,t}(x) == x"


def suite_norm_formula(rng, n: int = 200_000, d: int = 3):
    worst = 0.0
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        x0, x1 = _batch(rng, n, 1, d)
        xt = interpolate(LINEAR, x0, x1, np.full(n, t))
        mc = float(np.mean((xt**2).sum(axis=(1, 2))))
        worst = max(worst, abs(mc / expected_interpolant_norm(d, t) - 1.0))
    return worst < 0.01, f"max rel err {worst:.2e}"


SUITES: dict[str, Callable] = {
    "ecld_bound": suite_ecld_bound,
    "pinsker": suite_pinsker,
    "jvp_fd": suite_jvp_fd,
    "confinement": suite_confinement,
    "identity": suite_identity,
    "norm_formula": suite_norm_formula,
}


def run_selfcheck(seed: int = 0, td_power: str = "gamma_sq", suites=None,
                  echo: Callable[[str], None] | None = None) -> dict[str, tuple[bool, str]]:
    """Run each suite with its own child seed; ``td_power`` exists for mutation testing."""
    names = list(suites or SUITES)
    children = np.random.SeedSequence(seed).spawn(len(names))
    results = {}
    for name, ss in zip(names, children):
        rng = np.random.default_rng(ss)
        start = time.perf_counter()
        if name == "ecld_bound":
            ok, detail = SUITES[name](rng, td_power=td_power)
        else:
            ok, detail = SUITES[name](rng)
        results[name] = (bool(ok), detail)
        if echo:
            echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - start:.1f}s)")
    return results
