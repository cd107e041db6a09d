import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dris_catch import physics as ph


def flat_plate(center=(0.0, 0.0, 1.0), velocity=(0.0, 0.0, 0.0)):
    plate = ph.PlateKinematics.at_rest(np.array(center, dtype=float))
    plate.linear_velocity = np.array(velocity, dtype=float)
    return plate


def params(radius=0.03, mu_s=0.05, mu_d=0.05, e=0.5):
    return ph.BallParams(np.array(radius), np.array(mu_s), np.array(mu_d), np.array(e))


def touching_ball(vel, radius=0.03, center=(0.0, 0.0, 1.0)):
    pos = np.array(center) + np.array([0.0, 0.0, radius - 1e-4])
    return ph.BallState(pos, np.array(vel, dtype=float))


# -- impact oracles -------------------------------------------------------------------

@pytest.mark.parametrize("e", [0.4, 0.55, 0.7])
def test_restitution_flips_normal_speed(e):
    out = ph.resolve_impact(touching_ball([0.0, 0.0, -2.0]), flat_plate(), params(e=e), )
    np.testing.assert_allclose(out.velocity, [0.0, 0.0, 2.0 * e], atol=1e-9)


def test_sliding_friction_removes_mu_times_normal_impulse():
    # jn = (1 + e) * 2 = 3; tangential speed drops by mu_d * jn = 0.3.
    out = ph.resolve_impact(touching_ball([1.0, 0.0, -2.0]), flat_plate(), params(mu_s=0.05, mu_d=0.1, e=0.5))
    np.testing.assert_allclose(out.velocity, [0.7, 0.0, 1.0], atol=1e-9)


def test_static_friction_sticks_slow_tangential_motion():
    out = ph.resolve_impact(touching_ball([0.05, -0.02, -2.0]), flat_plate(), params(mu_s=0.1, mu_d=0.05, e=0.5))
    np.testing.assert_allclose(out.velocity, [0.0, 0.0, 1.0], atol=1e-9)


def test_friction_never_reverses_tangential_velocity():
    out = ph.resolve_impact(touching_ball([0.2, 0.0, -5.0]), flat_plate(), params(mu_s=0.0, mu_d=0.1, e=0.7))
    assert out.velocity[0] == pytest.approx(0.0, abs=1e-12)


def test_impact_uses_velocity_relative_to_moving_plate():
    # Plate rising at 1 m/s, ball falling at 2 m/s: relative approach 3 m/s.
    plate = flat_plate(velocity=(0.0, 0.0, 1.0))
    out = ph.resolve_impact(touching_ball([0.0, 0.0, -2.0]), plate, params(e=0.5))
    np.testing.assert_allclose(out.velocity, [0.0, 0.0, 1.0 + 0.5 * 3.0], atol=1e-9)


def test_slow_contact_is_inelastic():
    out = ph.resolve_impact(touching_ball([0.0, 0.0, -0.05]), flat_plate(), params(e=0.7))
    np.testing.assert_allclose(out.velocity, 0.0, atol=1e-12)


def test_separating_ball_is_untouched():
    ball = touching_ball([0.3, 0.0, 1.0])
    out = ph.resolve_impact(ball, flat_plate(), params())
    np.testing.assert_array_equal(out.velocity, ball.velocity)
    np.testing.assert_array_equal(out.position, ball.position)


def test_ball_outside_plate_square_falls_past():
    ball = ph.BallState(np.array([0.2, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]))
    out = ph.resolve_impact(ball, flat_plate(), params())
    np.testing.assert_array_equal(out.velocity, ball.velocity)


def test_contact_projects_ball_onto_surface():
    out = ph.resolve_impact(touching_ball([0.0, 0.0, -1.0], radius=0.03), flat_plate(), params(radius=0.03))
    assert out.position[2] - 1.0 == pytest.approx(0.03, abs=1e-12)


def test_fast_ball_cannot_tunnel():
    # One large step carries the ball from above to well below the plane.
    ball = ph.BallState(np.array([0.0, 0.0, 1.05]), np.array([0.0, 0.0, -8.0]))
    out = ph.advance_balls(ball, params(), flat_plate(), dt=0.02)
    assert out.position[2] >= 1.0
    assert out.velocity[2] > 0


@settings(max_examples=200, deadline=None)
@given(
    vz=st.floats(-8.0, -0.2), vx=st.floats(-3.0, 3.0), vy=st.floats(-3.0, 3.0),
    e=st.floats(0.4, 0.8), mu_s=st.floats(0.0, 0.1), mu_d=st.floats(0.0, 0.1),
)
def test_impact_never_adds_energy_on_static_plate(vz, vx, vy, e, mu_s, mu_d):
    ball = touching_ball([vx, vy, vz])
    out = ph.resolve_impact(ball, flat_plate(), params(mu_s=mu_s, mu_d=mu_d, e=e))
    assert np.sum(out.velocity**2) <= np.sum(ball.velocity**2) + 1e-12
    # Outgoing normal speed is exactly e times incoming.
    assert out.velocity[2] == pytest.approx(-e * vz, abs=1e-9)


# -- free flight and servo -------------------------------------------------------------

def test_free_flight_matches_semi_implicit_recursion():
    h = ph.CONTROL_DT / ph.SUBSTEPS
    ball = ph.BallState(np.array([2.0, 0.0, 3.0]), np.array([-1.0, 0.5, 2.0]))
    out, _, _ = ph.step_world(ball, params(), flat_plate(), np.array([0.0, 0.0, 1.0]), np.eye(3))
    v, p = ball.velocity.copy(), ball.position.copy()
    for _ in range(ph.SUBSTEPS):
        v[2] -= ph.GRAVITY * h
        p = p + h * v
    np.testing.assert_allclose(out.position, p, atol=1e-12)
    np.testing.assert_allclose(out.velocity, v, atol=1e-12)


def test_critical_damping_gains():
    g = ph.ServoGains.critically_damped(0.15)
    omega = math.sqrt(g.stiffness)
    assert g.damping == pytest.approx(2 * omega)
    # 2% settling of a critically damped system: (1 + w t) exp(-w t) = 0.02.
    x = omega * 0.15
    assert (1 + x) * math.exp(-x) == pytest.approx(0.02, rel=1e-6)


def _servo_step_error(h, duration=0.25):
    gains = ph.ServoGains.critically_damped(0.15)
    omega = math.sqrt(gains.stiffness)
    plate = flat_plate(center=(0.0, 0.0, 0.0))
    target = np.array([0.1, 0.0, 0.0])
    worst = 0.0
    for k in range(1, int(round(duration / h)) + 1):
        plate = ph.plate_servo_step(plate, target, np.eye(3), gains, h)
        exact = 0.1 * (1 - (1 + omega * k * h) * math.exp(-omega * k * h))
        worst = max(worst, abs(plate.center[0] - exact))
    return worst, plate.center[0]


def test_servo_step_response_converges_to_analytic_solution():
    coarse, final = _servo_step_error(1.0 / 240.0)
    fine, _ = _servo_step_error(1.0 / 24000.0)
    # First-order integrator: error shrinks ~linearly with the step size.
    assert coarse < 0.01
    assert fine < coarse / 50
    assert abs(final - 0.1) < 0.002


def test_servo_rotation_converges_and_stays_orthonormal():
    plate = flat_plate()
    target = ph.rodrigues_rotation(0.7, 0.5)
    for _ in range(120):
        plate = ph.plate_servo_step(plate, plate.center, target, ph.DEFAULT_GAINS, 1.0 / 240.0)
    np.testing.assert_allclose(plate.orientation, target, atol=1e-4)
    np.testing.assert_allclose(plate.orientation @ plate.orientation.T, np.eye(3), atol=1e-12)


def test_non_finite_target_raises_fault():
    with pytest.raises(ph.SimulationFault):
        ph.plate_servo_step(flat_plate(), np.array([np.nan, 0, 0]), np.eye(3))


def test_invalid_gains_rejected():
    with pytest.raises(ph.ConfigurationError):
        ph.ServoGains(stiffness=-1.0, damping=1.0)


# -- rotations ------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_log_inverts_exp(w):
    w = np.array(w)
    if np.linalg.norm(w) >= math.pi - 1e-3:
        w = w / np.linalg.norm(w) * (math.pi - 1e-3)
    np.testing.assert_allclose(ph.log_so3(ph.exp_so3(w)), w, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 2 * math.pi), st.floats(0.0, math.pi / 4))
def test_rodrigues_normal_formula(alpha, beta):
    n = ph.rodrigues_rotation(alpha, beta)[:, 2]
    expected = [math.sin(alpha) * math.sin(beta), -math.cos(alpha) * math.sin(beta), math.cos(beta)]
    np.testing.assert_allclose(n, expected, atol=1e-12)


def test_exp_of_small_rotation_is_accurate():
    w = np.array([1e-9, -2e-9, 3e-9])
    np.testing.assert_allclose(ph.log_so3(ph.exp_so3(w)), w, rtol=1e-6, atol=0)


# -- parameters -----------------------------------------------------------------------

def test_sampled_parameters_lie_in_ranges():
    p = ph.sample_domain_params(np.random.default_rng(0), ph.TRAINING_RANGES, size=(1000,))
    for name, (lo, hi) in vars(ph.TRAINING_RANGES).items():
        vals = getattr(p, name)
        assert vals.min() >= lo and vals.max() <= hi


def test_ood_restitution_range():
    p = ph.sample_domain_params(np.random.default_rng(1), ph.OOD_RANGES, size=(1000,))
    assert p.restitution.min() >= 0.7 and p.restitution.max() <= 0.8


def test_invalid_range_rejected():
    with pytest.raises(ph.ConfigurationError):
        ph.ParamRanges(restitution=(0.8, 0.4))
