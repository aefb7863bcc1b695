import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catflowmap import autodiff as ad
from catflowmap.interpolant import (
    CLAMP, LINEAR, ScheduleSingularity, ShapeMismatch, Schedule, expected_interpolant_norm,
    interpolate, linear_as_affine, one_minus, sample_prior, score_from_velocity, trig_schedule,
    velocity_from_endpoint,
)

times = st.floats(0.0, 1.0, allow_nan=False)


def test_endpoints():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3, 2, 4))
    x1 = np.eye(4)[rng.integers(0, 4, (3, 2))]
    np.testing.assert_array_equal(interpolate(LINEAR, x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(LINEAR, x0, x1, 1.0), x1)


def test_interpolate_per_item_times():
    x0, x1 = np.zeros((2, 1, 2)), np.ones((2, 1, 2))
    out = interpolate(LINEAR, x0, x1, np.array([0.25, 0.75]))
    np.testing.assert_allclose(out[:, 0, 0], [0.25, 0.75])


def test_interpolate_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        interpolate(LINEAR, np.zeros((1, 2, 3)), np.zeros((1, 2, 4)), 0.5)


def test_sample_prior_shape_and_errors():
    x = sample_prior(np.random.default_rng(0), 5, 2, 3)
    assert x.shape == (5, 2, 3)
    with pytest.raises(ValueError):
        sample_prior(np.random.default_rng(0), 0, 2, 3)


@settings(max_examples=50, deadline=None)
@given(t=times, seed=st.integers(0, 2**31))
def test_general_affine_matches_linear(t, seed):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.standard_normal((2, 3, 2, 3))
    np.testing.assert_allclose(interpolate(linear_as_affine(), x0, x1, t),
                               interpolate(LINEAR, x0, x1, t), atol=1e-14)


def test_interpolate_hand_value():
    out = interpolate(LINEAR, np.array([0.0, 0.0]), np.array([1.0, 0.0]), 0.25)
    np.testing.assert_allclose(out, [0.25, 0.0])


def test_velocity_hand_value():
    v = velocity_from_endpoint(np.array([1.0, 0.0]), np.array([0.5, 0.5]), 0.5)
    np.testing.assert_allclose(v, [1.0, -1.0])


def test_velocity_fixed_point():
    x = np.random.default_rng(0).standard_normal((2, 3, 4))
    assert np.all(velocity_from_endpoint(x, x, 0.3) == 0)


def test_velocity_clamped_near_one():
    v = velocity_from_endpoint(np.array([1.0, 0.0]), np.array([0.0, 0.0]), 1.0)
    np.testing.assert_allclose(v, [1.0 / CLAMP, 0.0])
    assert np.all(np.isfinite(v))


def test_velocity_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        velocity_from_endpoint(np.zeros(3), np.zeros(2), 0.5)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.0, 0.9), seed=st.integers(0, 2**31))
def test_velocity_general_affine_agrees(t, seed):
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.ones(3), size=(2, 2))
    x = rng.standard_normal((2, 2, 3))
    np.testing.assert_allclose(velocity_from_endpoint(pi, x, t, linear_as_affine()),
                               velocity_from_endpoint(pi, x, t), rtol=1e-10, atol=1e-12)


def test_trig_schedule_velocity_is_conditional_drift():
    # with pi = x1 the general-affine velocity equals d/dt of the interpolant
    rng = np.random.default_rng(3)
    sched = trig_schedule()
    x0, x1 = rng.standard_normal((2, 4, 1, 3))
    t = 0.37
    xt = interpolate(sched, x0, x1, t)
    v = velocity_from_endpoint(x1, xt, t, sched)
    eps = 1e-6
    fd = (interpolate(sched, x0, x1, t + eps) - interpolate(sched, x0, x1, t - eps)) / (2 * eps)
    np.testing.assert_allclose(v, fd, atol=1e-7)


def test_singular_schedule_raises():
    sched = Schedule(alpha=lambda t: np.zeros_like(t), beta=lambda t: t,
                     alpha_dot=lambda t: -np.ones_like(t), beta_dot=lambda t: np.ones_like(t))
    with pytest.raises(ScheduleSingularity):
        velocity_from_endpoint(np.zeros((1, 1, 2)), np.zeros((1, 1, 2)), 0.5, sched)


def test_score_hand_value():
    s = score_from_velocity(np.array([1.0, 1.0]), np.array([2.0, 2.0]), 0.5)
    np.testing.assert_allclose(s, [-3.0, -3.0])
    s = score_from_velocity(np.zeros(2), np.array([1.0, 1.0]), 0.5)
    np.testing.assert_allclose(s, [-2.0, -2.0])


def test_score_at_zero_is_prior_score():
    x = np.random.default_rng(0).standard_normal((3, 2, 2))
    np.testing.assert_allclose(score_from_velocity(np.ones_like(x), x, 0.0), -x)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.0, 0.9), seed=st.integers(0, 2**31))
def test_gaussian_marginal_score(t, seed):
    # data x1 = 0: x_t ~ N(0, (1-t)^2), exact velocity -x/(1-t)
    x = np.random.default_rng(seed).standard_normal((4, 2, 3))
    v = velocity_from_endpoint(np.zeros_like(x), x, t)
    np.testing.assert_allclose(score_from_velocity(v, x, t), -x / (1 - t) ** 2,
                               rtol=1e-9, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.0, 0.999), seed=st.integers(0, 2**31))
def test_velocity_score_round_trip(t, seed):
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.ones(3), size=(2, 2))
    x = rng.standard_normal((2, 2, 3))
    s = score_from_velocity(velocity_from_endpoint(pi, x, t), x, t)
    c = max(1 - t, CLAMP)
    np.testing.assert_allclose(s, (t * (pi - x) / c - x) / c, rtol=1e-12, atol=1e-12)
    assert np.all(np.isfinite(s))


def test_one_minus_accepts_duals_and_has_zero_slope_when_clamped():
    out = ad.forward_jvp(lambda t: one_minus(t), np.array([0.5, 0.99]))
    np.testing.assert_allclose(out.primal, [0.5, CLAMP])
    np.testing.assert_allclose(out.tangent, [-1.0, 0.0])


def test_norm_formula_values():
    assert expected_interpolant_norm(3, 0.0) == 3.0
    assert expected_interpolant_norm(3, 1.0) == 1.0
    assert expected_interpolant_norm(4, 0.5) == pytest.approx(1.25)
    with pytest.raises(ValueError):
        expected_interpolant_norm(0, 0.5)


@pytest.mark.parametrize("t", [0.0, 0.5, 1.0])
def test_norm_formula_monte_carlo(t):
    rng = np.random.default_rng(11)
    n, d = 200_000, 5
    x0 = rng.standard_normal((n, 1, d))
    x1 = np.eye(d)[rng.integers(0, d, (n, 1))]
    mc = np.mean((interpolate(LINEAR, x0, x1, t) ** 2).sum(axis=(1, 2)))
    assert abs(mc / expected_interpolant_norm(d, t) - 1) < 0.01
