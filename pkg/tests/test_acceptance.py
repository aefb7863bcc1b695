"""End-to-end acceptance criteria.

Each test records one line in ``ACCEPTANCE`` that the terminal summary
prints, then asserts.  The trained-model criteria share one session
fixture that trains the reference configuration under three seeds.
"""

import time

import numpy as np
import pytest

from catflowmap import autodiff as ad
from catflowmap import losses as L
from catflowmap.checkpoint import from_bytes, to_bytes
from catflowmap.data import make_parity_dataset, make_two_class_dataset, tv_between
from catflowmap.evaluate import eval_model
from catflowmap.flowmap import TimePair, flow_map_apply, flow_map_with_dt
from catflowmap.guidance import SMCConfig, ZeroReward, fit_logistic, guided_sample
from catflowmap.interpolant import LINEAR, expected_interpolant_norm, interpolate, sample_prior
from catflowmap.losses import LossConfig
from catflowmap.predictor import Predictor, PredictorConfig, predict
from catflowmap.sampler import TimeGrid, default_sigma, sample_sde
from catflowmap.selfcheck import random_predictor, run_selfcheck
from catflowmap.trainer import TrainConfig, run_training

from conftest import ACCEPTANCE, fd_grad, probe_coords, rel_err

SEEDS = (0, 1, 2)
N_EVAL = 50_000

# reference configuration for the trained-model criteria
MODEL = dict(D=4, K=3, width=256, depth=3, embed_dim=32, activation="relu")
TRAIN = dict(steps=55_000, batch_size=256, lr=2e-3, warmup_steps=200, log_every=1000,
             uniform_time_fraction=0.5)
LOSS = dict(kind="ecld", diagonal_fraction=0.75, label_smoothing=0.1)


def record(name, ok, detail):
    ACCEPTANCE[name] = (bool(ok), detail)
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def parity_models():
    ds = make_parity_dataset(4, 3)
    pcfg = PredictorConfig(**MODEL)
    out = {}
    for seed in SEEDS:
        start = time.process_time()
        ck = run_training(pcfg, TrainConfig(**TRAIN, seed=seed), LossConfig(**LOSS), ds)
        out[seed] = (Predictor(pcfg, ck.ema), time.process_time() - start)
    return ds, out


# -- AC-1 ----------------------------------------------------------------------------


def test_ac1_ecld_bound():
    start = time.process_time()
    res = run_selfcheck(0, suites=["ecld_bound"])["ecld_bound"]
    cpu = time.process_time() - start
    record("AC-1", res[0] and cpu < 120, f"1000 draws, {res[1]}, {cpu:.0f}s CPU")


# -- AC-2 / AC-3 -------------------------------------------------------------------------


def test_ac2_few_step_quality(parity_models):
    ds, models = parity_models
    validity, tv, cpu = [], [], []
    for seed, (net, secs) in models.items():
        validity.append(eval_model(net, ds, "flowmap", 1, N_EVAL, seed=100 + seed).validity)
        tv.append(eval_model(net, ds, "flowmap", 4, N_EVAL, seed=200 + seed).tv)
        cpu.append(secs)
    spread_v, spread_tv = np.ptp(validity), np.ptp(tv)
    ok = (min(validity) >= 0.90 and max(tv) <= 0.15 and spread_v <= 0.03 and spread_tv <= 0.03
          and max(cpu) <= 1800)
    detail = (f"validity@1 {[round(v, 3) for v in validity]}, TV@4 {[round(v, 3) for v in tv]}, "
              f"train CPU <= {max(cpu):.0f}s")
    record("AC-2", ok, detail)


def test_ac3_flowmap_vs_euler(parity_models):
    ds, models = parity_models
    net = models[SEEDS[0]][0]
    fm = {n: eval_model(net, ds, "flowmap", n, N_EVAL, seed=300 + n).tv for n in (1, 2)}
    eu = {n: eval_model(net, ds, "euler", n, N_EVAL, seed=400 + n).tv for n in (1, 2, 4, 8, 16, 32)}
    beats = all(fm[n] <= eu[n] + 0.02 for n in (1, 2))
    ladder = [eu[n] for n in (2, 4, 8, 16, 32)]
    monotone = all(b <= a + 0.02 for a, b in zip(ladder, ladder[1:]))
    detail = (f"flowmap {[round(fm[n], 3) for n in (1, 2)]} vs euler "
              f"{[round(eu[n], 3) for n in (1, 2)]}; euler ladder {[round(v, 3) for v in ladder]}")
    record("AC-3", beats and monotone, detail)


# -- AC-4 ----------------------------------------------------------------------------------


def test_ac4_tangent_identity_confinement():
    rng = np.random.default_rng(4)
    net = random_predictor(rng)
    x = rng.standard_normal((500, 3, 3))
    t = rng.uniform(0, 1, 500)
    identity = np.array_equal(ad.value(flow_map_apply(x, net(x, t, t), TimePair(t, t))), x)

    smooth = random_predictor(rng, scale=0.1)
    t = rng.uniform(0, 0.9, 500)
    eps = 1e-4
    step = ad.value(flow_map_apply(x, smooth(x, t, t + eps), TimePair(t, t + eps)))
    v = (ad.value(smooth(x, t, t)) - x) / (1 - t)[:, None, None]
    # one-sided difference: truncation error scales with |v|, so measure relative to it
    tangent = float(np.max(np.abs((step - x) / eps - v)) / np.max(np.abs(v)))

    conf = run_selfcheck(4, suites=["confinement"])["confinement"]
    record("AC-4", identity and tangent < 1e-3 and conf[0],
           f"identity bit-exact {identity}, tangent FD rel err {tangent:.1e}, confinement: {conf[1]}")


# -- AC-5 ----------------------------------------------------------------------------------


def test_ac5_guidance(parity_models):
    _, models = parity_models
    net = models[SEEDS[0]][0]
    ds = make_two_class_dataset(4, 3)
    rng = np.random.default_rng(5)
    states = ds.sample_states(rng, 20_000)
    reward = fit_logistic(np.eye(3)[states], ds.label(states), target=0)
    grid = TimeGrid.uniform(16)

    n = 4000
    plain = sample_sde(net, 51, grid, n, 4, 3)
    guided = guided_sample(net, reward, grid, 8, n, 4, 3, SMCConfig(lookahead="flowmap"), seed=52)
    f_plain = np.mean(ds.label(plain.states) == 0)
    f_guided = np.mean(ds.label(guided.states) == 0)

    null = guided_sample(net, ZeroReward(), grid, 8, N_EVAL, 4, 3, seed=53)
    ref = sample_sde(net, 54, grid, N_EVAL, 4, 3, sigma=default_sigma(1.0))
    tv0 = tv_between(null.states, ref.states)
    record("AC-5", f_guided >= 2 * f_plain and tv0 < 0.03,
           f"class-0 frequency {f_plain:.3f} -> {f_guided:.3f}, zero-reward TV {tv0:.4f}")


# -- AC-6 ----------------------------------------------------------------------------------


def _batch(rng, B=4, D=3, K=3):
    x0 = rng.standard_normal((B, D, K))
    x1 = np.eye(K)[rng.integers(0, K, (B, D))]
    a, b = rng.uniform(0, 0.9, (2, B))
    return x0, x1, TimePair(np.minimum(a, b), np.maximum(a, b))


def _loss_fns(net, vnet, x0, x1, tp):
    # teachers are frozen values so finite differences leave them fixed
    fm = flow_map_with_dt(net, interpolate(LINEAR, x0, x1, tp.s), tp)
    target = net.numpy(ad.value(fm.x_out), tp.t, tp.t)
    teacher = lambda *a: target
    x_t = interpolate(LINEAR, x0, x1, tp.t)

    def f(P, cfg):
        return lambda x, s, t: predict(P, x, s, t, cfg)

    x_s = interpolate(LINEAR, x0, x1, tp.s)
    X = x_s + (tp.t - tp.s)[:, None, None] * vnet.numpy(x_s, tp.s, tp.t)
    v_target = vnet.numpy(X, tp.t, tp.t)
    naive_teacher = lambda *a: v_target

    return {
        "inf": (net, lambda P: L.loss_inf(f(P, net.cfg), x1, x_t, tp.t, 0.1)),
        "csd": (net, lambda P: L.loss_csd(f(P, net.cfg), x0, x1, tp, teacher=teacher)),
        "ec": (net, lambda P: L.loss_ec(f(P, net.cfg), x0, x1, tp, teacher=teacher)),
        "td": (net, lambda P: L.loss_td(f(P, net.cfg), x0, x1, tp)),
        "ecld": (net, lambda P: L.loss_ecld(f(P, net.cfg), x0, x1, tp, teacher=teacher)),
        "naive": (vnet, lambda P: L.loss_naive_lsd(f(P, vnet.cfg), x0, x1, tp,
                                                    teacher=naive_teacher)),
        "weighted": (net, lambda P: L.apply_uncertainty_weight(
            L.loss_ecld(f(P, net.cfg), x0, x1, tp, teacher=teacher), 0.3)),
    }


def test_ac6_differentiation():
    rng = np.random.default_rng(6)
    net = random_predictor(rng, width=10)
    vcfg = PredictorConfig(D=3, K=3, width=8, embed_dim=8, head="velocity")
    vnet = Predictor(vcfg, {k: v + 0.3 * rng.standard_normal(v.shape)
                            for k, v in Predictor(vcfg).params.items()})
    x0, x1, tp = _batch(rng)
    worst_grad = 0.0
    for name, (owner, loss) in _loss_fns(net, vnet, x0, x1, tp).items():
        g = ad.grad(loss, owner.params)
        for k, idx in probe_coords(owner.params, rng):
            if k.startswith("wn."):
                continue
            worst_grad = max(worst_grad, rel_err(fd_grad(loss, owner.params, k, idx),
                                                 g[k][idx], 1e-7))

    x = rng.standard_normal((4, 3, 3))
    eps = 1e-5
    out = ad.forward_jvp(lambda u: net(x, tp.s, u), tp.t)
    fd = (net.numpy(x, tp.s, tp.t + eps) - net.numpy(x, tp.s, tp.t - eps)) / (2 * eps)
    worst_jvp = float(np.max(np.abs(out.tangent - fd)) / np.max(np.abs(fd)))
    X = lambda t: ad.value(flow_map_apply(x, net(x, tp.s, t), TimePair(tp.s, t)))
    fd = (X(tp.t + eps) - X(tp.t - eps)) / (2 * eps)
    dt = ad.value(flow_map_with_dt(net, x, tp).dt_out)
    worst_jvp = max(worst_jvp, float(np.max(np.abs(dt - fd)) / np.max(np.abs(fd))))

    # a detached factor behaves exactly like a constant of the same value
    def sg_loss(P):
        y = predict(P, x, tp.s, tp.t, net.cfg)
        return ad.sum_(ad.mul(ad.stop_gradient(ad.add(ad.square(y), 0.5)), y))

    c = net.numpy(x, tp.s, tp.t) ** 2 + 0.5
    got = ad.grad(sg_loss, net.params)
    expect = ad.grad(lambda P: ad.sum_(ad.mul(c, predict(P, x, tp.s, tp.t, net.cfg))),
                     net.params)
    detached = all(np.allclose(got[k], expect[k], rtol=1e-12, atol=1e-15) for k in got)
    record("AC-6", worst_grad < 1e-4 and worst_jvp < 1e-5 and detached,
           f"grad rel err {worst_grad:.1e} over 7 losses, JVP rel err {worst_jvp:.1e}, "
           f"stop_gradient detached {detached}")


# -- AC-7 ----------------------------------------------------------------------------------


def test_ac7_norm_formula():
    rng = np.random.default_rng(7)
    n, d = 1_000_000, 3
    worst = 0.0
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        x0 = sample_prior(rng, n, 1, d)
        x1 = np.eye(d)[rng.integers(0, d, (n, 1))]
        mc = np.mean(np.sum(interpolate(LINEAR, x0, x1, np.full(n, t)) ** 2, axis=(1, 2)))
        worst = max(worst, abs(mc / (d * (1 - t) ** 2 + t**2) - 1))
        assert expected_interpolant_norm(d, t) == pytest.approx(d * (1 - t) ** 2 + t**2)
    record("AC-7", worst < 0.01, f"max rel err {worst:.2e} over 5 times, 1e6 draws each")


# -- AC-8 ----------------------------------------------------------------------------------


def test_ac8_determinism_and_persistence():
    ds = make_parity_dataset(4, 3)
    pcfg = PredictorConfig(D=4, K=3, width=32, embed_dim=8)
    tcfg = TrainConfig(steps=50, batch_size=64, warmup_steps=10, seed=8)
    blobs = [to_bytes(run_training(pcfg, tcfg, LossConfig(), ds, {"model": pcfg.to_dict()}))
             for _ in range(2)]
    same = blobs[0] == blobs[1]
    back = from_bytes(blobs[0])
    round_trip = to_bytes(back) == blobs[0]
    record("AC-8", same and round_trip,
           f"rerun byte-identical {same}, round trip bit-exact {round_trip}")
