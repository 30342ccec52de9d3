"""Rigid-body model and kinematics of a 3-joint desktop haptic manipulator.

Joint 1 is a base yaw about the vertical axis. Joints 2 and 3 drive a planar
two-link chain: joint 2 elevates the upper arm and joint 3 is the absolute
angle of the forearm, measured downward from horizontal (parallel-linkage
style, so the gravity load of each link depends only on its own angle).

Each joint is an independent inertia with viscous friction and a cosine
gravity load; joints couple only through external forces mapped by J^T.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class NonFiniteState(FloatingPointError):
    """Raised when the integrated state contains NaN or inf."""


@dataclass(frozen=True)
class ManipulatorParams:
    inertia: tuple[float, float, float] = (4.0e-3, 8.21e-3, 3.43e-3)  # kg m^2
    gravity_coeff: tuple[float, float, float] = (0.0, 95e-3, 95e-3)  # Nm
    viscous_friction: float = 12e-3  # Nm s/rad
    link_lengths: tuple[float, float] = (0.135, 0.135)  # m
    joint_limits: tuple[tuple[float, float], ...] = ((-0.7, 0.7), (-0.1, 0.6), (-0.1, 0.7))
    torque_limit: float = 0.9  # Nm, motor saturation

    def __post_init__(self):
        if len(self.inertia) != 3 or min(self.inertia) <= 0:
            raise ValueError("inertia must be three positive values")
        if len(self.link_lengths) != 2 or min(self.link_lengths) <= 0:
            raise ValueError("link_lengths must be two positive values")
        if len(self.joint_limits) != 3 or any(lo >= hi for lo, hi in self.joint_limits):
            raise ValueError("joint_limits must be three (min, max) pairs with min < max")
        if self.viscous_friction < 0 or self.torque_limit <= 0:
            raise ValueError("friction must be >= 0 and torque_limit > 0")

    @property
    def J(self) -> np.ndarray:
        return np.asarray(self.inertia, dtype=float)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.joint_limits])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.joint_limits])

    def without_gravity(self) -> "ManipulatorParams":
        return replace(self, gravity_coeff=(0.0, 0.0, 0.0))


@dataclass
class ObserverState:
    """Per-joint filter memory for pseudo-derivative, DOB and RFOB."""

    theta_prev: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dob_lp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rfob_lp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tau_res: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def reset(cls, theta, params: ManipulatorParams | None = None, g: float = 40.0):
        """Zero estimates, filters primed so a robot at rest reads zero rate and zero reaction."""
        theta = np.array(theta, dtype=float)
        st = cls(theta_prev=theta.copy())
        if params is not None:
            # prime the low-pass memories with the static gravity load
            grav = gravity_torque(theta, params)
            st.dob_lp = grav.copy()
            st.d_hat = grav.copy()
            st.rfob_lp = grav.copy()
        return st

    def copy(self) -> "ObserverState":
        return ObserverState(*(getattr(self, f).copy() for f in
                               ("theta_prev", "velocity", "dob_lp", "rfob_lp", "d_hat", "tau_res")))


@dataclass
class RobotState:
    theta: np.ndarray
    theta_dot: np.ndarray
    observer: ObserverState
    last_torque_ref: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def at_rest(cls, theta, params: ManipulatorParams | None = None, g: float = 40.0):
        theta = np.array(theta, dtype=float)
        st = cls(theta=theta, theta_dot=np.zeros(3), observer=ObserverState.reset(theta, params, g))
        if params is not None:
            st.last_torque_ref = gravity_torque(theta, params)
        return st

    def copy(self) -> "RobotState":
        return RobotState(self.theta.copy(), self.theta_dot.copy(), self.observer.copy(),
                          self.last_torque_ref.copy())


def gravity_torque(theta, params: ManipulatorParams) -> np.ndarray:
    """Gravity load [0, M2 cos(theta2), M3 cos(theta3)]."""
    m = params.gravity_coeff
    return np.array([m[0], m[1] * np.cos(theta[1]), m[2] * np.cos(theta[2])])


def step_dynamics(state: RobotState, tau_ref, tau_external, dt: float,
                  params: ManipulatorParams) -> RobotState:
    """Advance J*qdd = tau_ref + tau_ext - gravity(q) - D*qd by one step.

    Velocity is updated first (friction treated implicitly so that stiff
    viscous terms stay stable), then position with the new velocity. Joints
    hitting a limit are clamped with zero velocity.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    J = params.J
    D = params.viscous_friction
    drive = np.asarray(tau_ref, dtype=float) + np.asarray(tau_external, dtype=float) \
        - gravity_torque(state.theta, params)
    qd = (state.theta_dot + dt * drive / J) / (1.0 + dt * D / J)
    q = state.theta + dt * qd
    lo, hi = params.lower, params.upper
    clipped = (q < lo) | (q > hi)
    if clipped.any():
        q = np.clip(q, lo, hi)
        qd = np.where(clipped, 0.0, qd)
    if not (np.isfinite(q).all() and np.isfinite(qd).all()):
        raise NonFiniteState(f"non-finite state after step: theta={q}, theta_dot={qd}")
    return RobotState(q, qd, state.observer, np.asarray(tau_ref, dtype=float))


def forward_kinematics(theta, params: ManipulatorParams) -> np.ndarray:
    """Pen-tip position (m) in the base frame."""
    l1, l2 = params.link_lengths
    rho = l1 * np.cos(theta[1]) + l2 * np.cos(theta[2])
    z = l1 * np.sin(theta[1]) - l2 * np.sin(theta[2])
    return np.array([rho * np.cos(theta[0]), rho * np.sin(theta[0]), z])


def jacobian(theta, params: ManipulatorParams) -> np.ndarray:
    """Analytic d(tip)/d(theta); columns are joints."""
    l1, l2 = params.link_lengths
    c1, s1 = np.cos(theta[0]), np.sin(theta[0])
    c2, s2 = np.cos(theta[1]), np.sin(theta[1])
    c3, s3 = np.cos(theta[2]), np.sin(theta[2])
    rho = l1 * c2 + l2 * c3
    return np.array([
        [-rho * s1, -l1 * s2 * c1, -l2 * s3 * c1],
        [rho * c1, -l1 * s2 * s1, -l2 * s3 * s1],
        [0.0, l1 * c2, -l2 * c3],
    ])


def inverse_kinematics(target, params: ManipulatorParams, theta0=(0.0, 0.4, 0.45),
                       tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Newton solve of forward_kinematics(theta) == target from theta0."""
    theta = np.array(theta0, dtype=float)
    target = np.asarray(target, dtype=float)
    for _ in range(max_iter):
        err = target - forward_kinematics(theta, params)
        if err @ err < tol * tol:
            return theta
        theta = theta + np.linalg.solve(jacobian(theta, params), err)
    raise ValueError(f"inverse kinematics did not converge for target {target}")


def kinetic_energy(state: RobotState, params: ManipulatorParams) -> float:
    return 0.5 * float(params.J @ state.theta_dot ** 2)
