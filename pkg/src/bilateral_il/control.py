"""Joint-space control stack: pseudo-derivatives, DOB/RFOB, and 4-ch bilateral laws.

All filters are first-order with the shared cutoff ``g`` and discretised by
backward Euler. Reaction torques follow the robot-on-environment sign
convention, so in the bilateral goal tau_m + tau_s = 0 an operator pushing the
master and a slave pressing a wall produce torques of opposite sign.

Motor torque is the bilateral reference plus the DOB estimate (disturbance
compensation); the logged "torque reference" is the bilateral term alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .sim import ManipulatorParams, ObserverState, RobotState, gravity_torque


@dataclass(frozen=True)
class ControllerGains:
    Kp: float = 100.0  # 1/s^2
    Kv: float = 20.0  # 1/s
    Kf: float = 1.0
    g: float = 40.0  # rad/s, observer and pseudo-derivative cutoff

    def __post_init__(self):
        if min(self.Kp, self.Kv, self.Kf, self.g) < 0:
            raise ValueError("gains must be non-negative")


class TorqueCommand(NamedTuple):
    ref: np.ndarray  # bilateral / tracking law output (what model 1 imitates)
    motor: np.ndarray  # ref + disturbance compensation, after saturation
    saturated: bool


def lowpass(prev, u, g: float, dt: float):
    return (prev + g * dt * u) / (1.0 + g * dt)


def pseudo_derivative(x_now, x_prev, rate_prev, g: float, dt: float):
    """One step of g*s/(s+g) applied to x."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return (rate_prev + g * (np.asarray(x_now) - x_prev)) / (1.0 + g * dt)


def position_control(theta_cmd, theta_res, theta_dot_cmd, theta_dot_res, gains: ControllerGains):
    return gains.Kp * (np.asarray(theta_cmd) - theta_res) + gains.Kv * (np.asarray(theta_dot_cmd) - theta_dot_res)


def force_control(tau_cmd, tau_res, gains: ControllerGains):
    return -gains.Kf * (np.asarray(tau_cmd) + tau_res)


def dob_update(lp_prev, theta_dot_res, tau_ref, J, g: float, dt: float):
    """Disturbance observer: d = LPF(tau + g J qd) - g J qd.

    Returns (d_hat, new low-pass state).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    gJv = g * np.asarray(J) * theta_dot_res
    lp = lowpass(lp_prev, np.asarray(tau_ref) + gJv, g, dt)
    return lp - gJv, lp


def rfob_update(lp_prev, d_hat, theta, theta_dot, params: ManipulatorParams, g: float, dt: float):
    """Reaction-force observer: DOB estimate minus the modelled gravity and friction.

    The model torque is passed through the same low-pass as the DOB so the
    two cancel during free motion. Returns (tau_res, new low-pass state).
    """
    model = gravity_torque(theta, params) + params.viscous_friction * np.asarray(theta_dot)
    lp = lowpass(lp_prev, model, g, dt)
    return d_hat - lp, lp


def observe(robot: RobotState, params: ManipulatorParams, gains: ControllerGains, dt: float) -> ObserverState:
    """Run the sensing pipeline on the current joint angles.

    Uses the motor torque applied over the last step (robot.last_torque_ref).
    """
    ob = robot.observer
    vel = pseudo_derivative(robot.theta, ob.theta_prev, ob.velocity, gains.g, dt)
    d_hat, dob_lp = dob_update(ob.dob_lp, vel, robot.last_torque_ref, params.J, gains.g, dt)
    tau_res, rfob_lp = rfob_update(ob.rfob_lp, d_hat, robot.theta, vel, params, gains.g, dt)
    return ObserverState(robot.theta.copy(), vel, dob_lp, rfob_lp, d_hat, tau_res)


def _finish(ref, robot: RobotState, params: ManipulatorParams, limit=None) -> TorqueCommand:
    if limit is not None:
        ref = np.clip(ref, -limit, limit)
    motor = ref + robot.observer.d_hat
    lim = params.torque_limit
    saturated = bool(np.any(np.abs(motor) > lim))
    if saturated:
        motor = np.clip(motor, -lim, lim)
    return TorqueCommand(ref, motor, saturated)


def bilateral_tick(master: RobotState, slave: RobotState, gains: ControllerGains,
                   params: ManipulatorParams, dt: float | None = None) -> tuple[TorqueCommand, TorqueCommand]:
    """4-ch bilateral law for both robots.

    tau_s = J/2 (Kp + Kv s)(q_m - q_s) - Kf/2 (tau_m + tau_s), and
    symmetrically for the master. Observers must already be updated.
    """
    half_J = 0.5 * params.J
    om, os_ = master.observer, slave.observer
    pos = half_J * position_control(master.theta, slave.theta, om.velocity, os_.velocity, gains)
    force = 0.5 * force_control(om.tau_res, os_.tau_res, gains)
    return _finish(force - pos, master, params), _finish(pos + force, slave, params)


def command_tracking_tick(slave: RobotState, theta_cmd, theta_dot_cmd, tau_cmd, gains: ControllerGains,
                          params: ManipulatorParams) -> TorqueCommand:
    """Slave half of the bilateral law with externally supplied commands."""
    os_ = slave.observer
    pos = 0.5 * params.J * position_control(theta_cmd, slave.theta, theta_dot_cmd, os_.velocity, gains)
    force = 0.5 * force_control(tau_cmd, os_.tau_res, gains)
    return _finish(pos + force, slave, params)


def reference_tick(slave: RobotState, tau_ref, params: ManipulatorParams, limit=None) -> TorqueCommand:
    """Apply an externally predicted torque reference (model-1 deployment)."""
    return _finish(np.asarray(tau_ref, dtype=float), slave, params, limit)
