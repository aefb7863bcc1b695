import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catflowmap import autodiff as ad
from catflowmap.flowmap import (
    TimePair, confinement_check, confinement_mask, flow_map_apply, flow_map_with_dt,
    lagrangian_residual,
)
from catflowmap.interpolant import CLAMP, ShapeMismatch
from catflowmap.selfcheck import random_predictor

from conftest import ConstantPredictor


def _pair(rng, B, lo=0.0, hi=0.9):
    a, b = rng.uniform(lo, hi, size=(2, B))
    return TimePair(np.minimum(a, b), np.maximum(a, b))


def test_timepair_validation():
    with pytest.raises(ValueError):
        TimePair(0.6, 0.5)
    with pytest.raises(ValueError):
        TimePair(-0.1, 0.5)
    with pytest.raises(ValueError):
        TimePair(0.1, 1.5)
    assert len(TimePair(np.zeros(4), np.ones(4))) == 4


def test_apply_hand_value():
    out = flow_map_apply(np.array([0.2, 0.8]), np.array([1.0, 0.0]), TimePair(0.0, 0.5))
    np.testing.assert_allclose(out, [0.6, 0.4])


def test_full_jump_lands_on_prediction():
    rng = np.random.default_rng(0)
    x, pi = rng.standard_normal((2, 3, 2, 4))
    np.testing.assert_array_equal(flow_map_apply(x, pi, TimePair(0.0, 1.0)), pi)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.0, 1.0), seed=st.integers(0, 2**31))
def test_identity_bit_exact(t, seed):
    rng = np.random.default_rng(seed)
    x, pi = rng.standard_normal((2, 3, 2, 4))
    np.testing.assert_array_equal(flow_map_apply(x, pi, TimePair(t, t)), x)


def test_apply_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        flow_map_apply(np.zeros((1, 2, 3)), np.zeros((1, 2, 2)), TimePair(0.0, 0.5))


def test_semigroup_for_constant_predictor():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 2, 3))
    c = rng.dirichlet(np.ones(3), size=(5, 2))
    s, u, t = 0.1, 0.45, 0.8
    two = flow_map_apply(flow_map_apply(x, c, TimePair(s, u)), c, TimePair(u, t))
    np.testing.assert_allclose(two, flow_map_apply(x, c, TimePair(s, t)), atol=1e-12)


def test_dt_constant_predictor():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 2, 3))
    c = np.array([0.2, 0.3, 0.5])
    tp = _pair(rng, 4)
    fm = flow_map_with_dt(ConstantPredictor(c), x, tp)
    expect = (c - x) / np.maximum(1 - tp.s, CLAMP)[:, None, None]
    np.testing.assert_allclose(ad.value(fm.dt_out), expect, rtol=1e-12)
    assert np.all(ad.value(fm.dpi) == 0)


def test_dt_on_diagonal_is_instantaneous_velocity(net):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 3))
    t = rng.uniform(0, 0.9, 4)
    fm = flow_map_with_dt(net, x, TimePair(t, t))
    pi = ad.value(net(x, t, t))
    np.testing.assert_allclose(ad.value(fm.dt_out), (pi - x) / (1 - t)[:, None, None],
                               rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(ad.value(fm.x_out), x)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_dt_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_predictor(rng, width=12)
    x = rng.standard_normal((3, 3, 3))
    tp = _pair(rng, 3, 0.0, 0.85)
    fm = flow_map_with_dt(net, x, tp)
    eps = 1e-5

    def X(t):
        return ad.value(flow_map_apply(x, net(x, tp.s, t), TimePair(tp.s, t)))

    fd = (X(tp.t + eps) - X(tp.t - eps)) / (2 * eps)
    dt = ad.value(fm.dt_out)
    assert np.max(np.abs(dt - fd)) / max(1e-3, np.max(np.abs(fd))) < 1e-5
    # product rule decomposition
    g = tp.gamma()[:, None, None]
    parts = (ad.value(fm.pi) - x) / (1 - tp.s)[:, None, None] + g * ad.value(fm.dpi)
    np.testing.assert_allclose(dt, parts, rtol=1e-10, atol=1e-12)


def test_tangent_condition_fd():
    rng = np.random.default_rng(4)
    net = random_predictor(rng, scale=0.1)
    x = rng.standard_normal((6, 3, 3))
    t = rng.uniform(0, 0.9, 6)
    eps = 1e-4
    step = ad.value(flow_map_apply(x, net(x, t, t + eps), TimePair(t, t + eps)))
    v = (ad.value(net(x, t, t)) - x) / (1 - t)[:, None, None]
    assert np.max(np.abs((step - x) / eps - v)) < 1e-3


def test_residual_zero_for_constant_predictor():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 2, 3))
    c = np.array([0.6, 0.3, 0.1])
    R = lagrangian_residual(x, _pair(rng, 8), ConstantPredictor(c))
    assert np.max(np.abs(ad.value(R))) < 1e-12


def test_residual_zero_on_diagonal(net):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 3, 3))
    t = rng.uniform(0, 0.9, 5)
    R = lagrangian_residual(x, TimePair(t, t), net)
    assert np.max(np.abs(ad.value(R))) < 1e-12


def test_residual_matches_fd_reimplementation(net):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 3, 3))
    tp = _pair(rng, 6, 0.0, 0.85)
    R = ad.value(lagrangian_residual(x, tp, net))
    eps = 1e-5

    def X(t):
        return ad.value(flow_map_apply(x, net(x, tp.s, t), TimePair(tp.s, t)))

    Xt = X(tp.t)
    dX = (X(tp.t + eps) - X(tp.t - eps)) / (2 * eps)
    ref = (1 - tp.t)[:, None, None] * dX - (ad.value(net(Xt, tp.t, tp.t)) - Xt)
    assert abs(np.sum(R**2) / np.sum(ref**2) - 1) < 1e-4


def test_residual_teacher_is_detached(net):
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 3, 3))
    tp = _pair(rng, 4)
    w = rng.standard_normal((4, 3, 3))

    def loss(P, teacher=None):
        from catflowmap.predictor import predict
        f = lambda xx, s, t: predict(P, xx, s, t, net.cfg)
        return ad.sum_(ad.mul(lagrangian_residual(x, tp, f, teacher=teacher), w))

    g_self = ad.grad(loss, net.params)
    frozen = lambda xx, s, t: net(xx, s, t)
    g_frozen = ad.grad(lambda P: loss(P, frozen), net.params)
    for k in g_self:
        np.testing.assert_allclose(g_self[k], g_frozen[k], rtol=1e-12, atol=1e-14)


# -- confinement --------------------------------------------------------------


def test_confinement_full_jump():
    pi = np.array([[[0.2, 0.3, 0.5]]])
    x = np.random.default_rng(0).standard_normal((1, 1, 3))
    out = flow_map_apply(x, pi, TimePair(0.0, 1.0))
    assert confinement_check(x, out, TimePair(0.0, 1.0))
    np.testing.assert_allclose(out, pi)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_confinement_random(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((8, 2, 4)) * 3
    pi = rng.dirichlet(np.ones(4) * 0.3, size=(8, 2))
    tp = _pair(rng, 8, 0.0, 1.0)
    assert confinement_check(x, flow_map_apply(x, pi, tp), tp)


def test_confinement_detects_perturbation():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 1, 3))
    tp = TimePair(0.0, 0.5)
    out = flow_map_apply(x, np.array([[[0.1, 0.2, 0.7]]]), tp)
    bad = out.copy()
    bad[0, 0, 0] += 0.1
    assert not confinement_check(x, bad, tp)


def test_confinement_identity_segment():
    x = np.ones((2, 1, 2))
    tp = TimePair(0.3, 0.3)
    assert confinement_mask(x, x, tp).all()
    assert not confinement_mask(x, x + 1e-3, tp).any()
