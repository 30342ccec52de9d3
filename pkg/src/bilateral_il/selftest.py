"""Oracle checks that must hold on every build: observer step response, BPTT gradient, normalisation."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .control import ControllerGains, dob_update, observe
from .dataset import NormRanges, TABLE_MODEL1, TABLE_MODEL2, denormalize, normalize
from .rnn import NetworkParams, loss_and_grad
from .sim import ManipulatorParams, RobotState, forward_kinematics, gravity_torque, jacobian, step_dynamics


def dob_step_response(g: float = 40.0, dt: float = 1e-3, duration: float = 0.2, step: float = 0.05,
                      joint: int = 1, params: ManipulatorParams = ManipulatorParams()):
    """Free joint (no gravity or friction, zero torque reference) hit by a constant disturbance at t = 0.

    The disturbance enters as J qdd = tau - d, the convention of the observer.
    The observer is fed the plant velocity, so its estimate should follow
    the first-order response step * (1 - exp(-g t)).
    Returns (t, estimate, analytic).
    """
    p = replace(params.without_gravity(), viscous_friction=0.0)
    J = p.J
    n = int(round(duration / dt))
    v = np.zeros(3)
    lp = np.zeros(3)
    est = np.zeros(n)
    dist = np.zeros(3)
    dist[joint] = step
    for k in range(n):
        v = v - dt * dist / J
        d_hat, lp = dob_update(lp, v, np.zeros(3), J, g, dt)
        est[k] = d_hat[joint]
    t = dt * np.arange(1, n + 1)
    return t, est, step * (1.0 - np.exp(-g * t))


def dob_timing(g: float = 40.0, dt: float = 1e-3, step: float = 0.05) -> dict:
    t, est, ref = dob_step_response(g, dt, 6.0 / g, step)
    k63 = int(np.argmax(est >= 0.632 * step))
    k99 = int(np.argmax(est >= 0.99 * step))
    return {"t63": t[k63], "t99": t[k99], "max_abs_dev": float(np.max(np.abs(est - ref)) / step)}


def rfob_tip_force(force=(0.0, 0.0, -0.5), theta0=(0.1, 0.35, 0.45), settle: float = 0.2, hold: bool = True,
                   gains: ControllerGains = ControllerGains(), params: ManipulatorParams = ManipulatorParams(),
                   dt: float = 1e-3):
    """Apply a constant tip force to a robot held still by its own compensation and read the RFOB.

    The robot runs with motor torque = DOB estimate, so it stays at rest while
    the observer converges. Returns (estimated reaction torque, J^T F) where
    the second is the torque the robot exerts on whatever applies F, i.e. the
    reaction sign used throughout.
    """
    robot = RobotState.at_rest(theta0, params, gains.g)
    F = np.asarray(force, dtype=float)
    jt = jacobian(robot.theta, params).T
    for _ in range(int(round(settle / dt))):
        robot.observer = observe(robot, params, gains, dt)
        motor = robot.observer.d_hat if hold else gravity_torque(robot.theta, params)
        robot = step_dynamics(robot, motor, jt @ F, dt, params)
    # the environment pushes with F; the robot pushes back with -F
    return robot.observer.tau_res.copy(), jt @ (-F), robot.theta.copy()


def gradient_check(seed: int = 0, eps: float = 1e-5, T: int = 5) -> float:
    """Worst relative error between BPTT and central differences on a [2,3,3,1] network."""
    rng = np.random.default_rng(seed)
    net = NetworkParams.init("M1", rng, sizes=(2, 3, 3, 1))
    X = rng.uniform(size=(T, 2))
    Y = rng.uniform(size=(T, 1))
    _, grads = loss_and_grad(net, X, Y)
    worst = 0.0
    for name, arr in net.arrays().items():
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + eps
            lp, _ = loss_and_grad(net, X, Y)
            arr[idx] = keep - eps
            lm, _ = loss_and_grad(net, X, Y)
            arr[idx] = keep
            num = (lp - lm) / (2 * eps)
            ana = grads[name][idx]
            scale = max(abs(num), abs(ana), 1e-7)
            worst = max(worst, abs(num - ana) / scale)
    return worst


def normalization_roundtrip(n: int = 100_000, seed: int = 0) -> float:
    """Worst |denorm(norm(x)) - x| relative to the channel span over random samples of both tables."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tab in (TABLE_MODEL1, TABLE_MODEL2):
        for key in ("inputs", "outputs"):
            b = np.array(tab[key])
            lo, hi = b[:, 0], b[:, 1]
            x = rng.uniform(lo - 0.5 * (hi - lo), hi + 0.5 * (hi - lo), size=(n, len(lo)))
            back = denormalize(normalize(x, lo, hi), lo, hi)
            worst = max(worst, float(np.max(np.abs(back - x) / (hi - lo))))
    return worst


def run_all():
    res = []
    tm = dob_timing()
    ok = abs(tm["t63"] - 0.025) <= 1e-3 + 1e-12 and tm["t99"] <= 5 / 40.0 + 1e-12 and tm["max_abs_dev"] <= 0.02
    res.append(("dob step response", ok,
                f"63.2% at {1e3 * tm['t63']:.0f} ms, 99% at {1e3 * tm['t99']:.0f} ms, "
                f"max deviation {100 * tm['max_abs_dev']:.2f}% of step"))
    est, ref, _ = rfob_tip_force()
    rel = float(np.max(np.abs(est - ref)) / np.max(np.abs(ref)))
    res.append(("rfob tip force", rel <= 0.05, f"relative error {100 * rel:.2f}%"))
    err = gradient_check()
    res.append(("bptt gradient", err <= 1e-4, f"worst relative error {err:.2e}"))
    rt = normalization_roundtrip()
    res.append(("normalisation round trip", rt < 1e-12, f"worst error {rt:.1e} of range"))
    t1 = NormRanges.table("M1")
    exact = np.array_equal(t1.output_hi, [0.020, 0.025, 0.015]) and np.array_equal(
        NormRanges.table("M2").input_lo[6:], [-0.250, -0.600, -0.100])
    res.append(("table defaults", bool(exact), "movable-range tables load exactly" if exact else "mismatch"))
    tip = forward_kinematics(np.zeros(3), ManipulatorParams())
    res.append(("kinematics", bool(np.allclose(tip, [0.27, 0, 0])), f"straight arm tip {tip}"))
    return res
