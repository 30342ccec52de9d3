from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilateral_il.sim import (
    ManipulatorParams,
    NonFiniteState,
    RobotState,
    forward_kinematics,
    gravity_torque,
    inverse_kinematics,
    jacobian,
    kinetic_energy,
    step_dynamics,
)

P = ManipulatorParams()
angles = st.tuples(
    st.floats(-0.7, 0.7), st.floats(-0.1, 0.6), st.floats(-0.1, 0.7)
).map(np.array)


def test_defaults_are_the_device_table():
    assert P.inertia == (4.0e-3, 8.21e-3, 3.43e-3)
    assert P.gravity_coeff == (0.0, 95e-3, 95e-3)
    assert P.link_lengths == (0.135, 0.135)
    # table ranges widened by 0.2 rad
    assert P.joint_limits == ((-0.7, 0.7), (-0.1, 0.6), (-0.1, 0.7))


@pytest.mark.parametrize("kw", [
    {"inertia": (4e-3, 0.0, 1e-3)},
    {"link_lengths": (0.1, -0.1)},
    {"joint_limits": ((0, 1), (1, 0), (0, 1))},
    {"viscous_friction": -1.0},
])
def test_invalid_params_rejected(kw):
    with pytest.raises(ValueError):
        ManipulatorParams(**kw)


def test_equilibrium_without_gravity():
    p = P.without_gravity()
    s = RobotState.at_rest([0.1, 0.2, 0.3])
    n = step_dynamics(s, np.zeros(3), np.zeros(3), 1e-3, p)
    assert np.array_equal(n.theta, s.theta)
    assert np.array_equal(n.theta_dot, np.zeros(3))


def test_single_euler_step():
    p = replace(P.without_gravity(), viscous_friction=0.0)
    s = RobotState.at_rest([0.0, 0.2, 0.3])
    n = step_dynamics(s, [0.0, 8.21e-3, 0.0], np.zeros(3), 1e-3, p)
    assert n.theta_dot[1] == pytest.approx(1e-3, rel=1e-12)
    # position uses the updated velocity
    assert n.theta[1] - 0.2 == pytest.approx(1e-6, rel=1e-9)


# the integrator must resolve the time constant J/D for the continuous oracle to apply
@pytest.mark.parametrize("D, dt", [(12e-3, 1e-3), (12.0, 1e-5)])
def test_terminal_velocity(D, dt):
    p = replace(P.without_gravity(), viscous_friction=D)
    J = p.J[0]
    tau = 1e-4 * D  # slow enough to stay inside the joint range
    s = RobotState.at_rest([0.0, 0.2, 0.3])
    steps = max(1, int(np.ceil(5 * J / D / dt)))
    for _ in range(steps):
        s = step_dynamics(s, [tau, 0.0, 0.0], np.zeros(3), dt, p)
    assert s.theta_dot[0] == pytest.approx(tau / D, rel=0.01)


def test_gravity_examples():
    assert gravity_torque([0, np.pi / 2, 0], P)[1] == pytest.approx(0.0, abs=1e-15)
    assert gravity_torque([0, 0, 0], P)[1] == 95e-3
    assert gravity_torque([0, 0, np.pi / 3], P)[2] == pytest.approx(47.5e-3, rel=1e-12)


def test_joint_limit_clamps_with_zero_velocity():
    s = RobotState.at_rest([0.0, 0.59, 0.3])
    for _ in range(50):
        s = step_dynamics(s, [0.0, 0.5, 0.0], np.zeros(3), 1e-3, P)
    assert s.theta[1] == P.upper[1]
    assert s.theta_dot[1] == 0.0


def test_non_finite_state_raises():
    s = RobotState.at_rest([0.0, 0.2, 0.3])
    with pytest.raises(NonFiniteState):
        step_dynamics(s, [np.nan, 0, 0], np.zeros(3), 1e-3, P)
    with pytest.raises(ValueError):
        step_dynamics(s, np.zeros(3), np.zeros(3), 0.0, P)


def test_step_is_bit_deterministic():
    rng = np.random.default_rng(4)
    s = RobotState.at_rest([0.1, 0.2, 0.3], P)
    taus = rng.normal(0, 0.05, size=(200, 3))
    runs = []
    for _ in range(2):
        x = s.copy()
        for tau in taus:
            x = step_dynamics(x, tau, np.zeros(3), 1e-3, P)
        runs.append(np.concatenate([x.theta, x.theta_dot]).tobytes())
    assert runs[0] == runs[1]


def test_energy_conserved_without_losses():
    p = replace(P.without_gravity(), viscous_friction=0.0)
    s = RobotState.at_rest([0.0, 0.2, 0.3])
    s.theta_dot = np.array([0.05, -0.04, 0.03])
    e0 = kinetic_energy(s, p)
    for _ in range(1000):
        n = step_dynamics(s, np.zeros(3), np.zeros(3), 1e-3, p)
        assert abs(kinetic_energy(n, p) - kinetic_energy(s, p)) < 1e-9
        s = n
    assert kinetic_energy(s, p) == pytest.approx(e0, abs=1e-12)


def test_forward_kinematics_examples():
    assert np.allclose(forward_kinematics([0, 0, 0], P), [0.27, 0, 0], atol=1e-15)
    assert np.allclose(forward_kinematics([np.pi / 2, 0, 0], P), [0, 0.27, 0], atol=1e-15)


def test_jacobian_singular_and_symmetric_at_straight_arm():
    J = jacobian(np.zeros(3), P)
    assert abs(np.linalg.det(J)) < 1e-15
    assert J[0, 0] == 0.0


@settings(max_examples=200, deadline=None)
@given(angles)
def test_jacobian_matches_central_differences(theta):
    h = 1e-6
    J = jacobian(theta, P)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (forward_kinematics(theta + e, P) - forward_kinematics(theta - e, P)) / (2 * h)
        scale = max(np.linalg.norm(J[:, j]), 1e-3)
        assert np.linalg.norm(fd - J[:, j]) <= 1e-6 * scale


def test_fk_jacobian_consistency_on_1000_poses():
    rng = np.random.default_rng(11)
    lo, hi = P.lower, P.upper
    A = rng.uniform(lo, hi, size=(1000, 3))
    B = rng.uniform(lo, hi, size=(1000, 3))
    # integrate J(theta(s)) dtheta along the straight joint path with Simpson's rule
    n = 64
    s = np.linspace(0, 1, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2], w[2:-1:2] = 4, 2
    w /= 3 * n
    for a, b in zip(A, B):
        d = b - a
        integral = sum(wi * jacobian(a + si * d, P) @ d for si, wi in zip(s, w))
        assert np.allclose(integral, forward_kinematics(b, P) - forward_kinematics(a, P), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(angles)
def test_inverse_kinematics_round_trip(theta):
    tip = forward_kinematics(theta, P)
    if abs(np.linalg.det(jacobian(theta, P))) < 1e-4:
        return
    q = inverse_kinematics(tip, P, theta0=theta + 0.05)
    assert np.allclose(forward_kinematics(q, P), tip, atol=1e-10)
