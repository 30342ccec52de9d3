"""Scripted virtual operator and the demonstration-collection loop.

The operator is an impedance "hand" on the master pen that follows
minimum-jerk waypoints: descend onto point 1, draw to point 2 on the ruler,
pause, then draw along the ruler to point 3. While drawing it presses down
with a constant bias and aims a few millimetres into the ruler.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .control import ControllerGains, bilateral_tick, observe
from .environment import InkTrace, Ruler, WorldConfig, contact, record_ink, ruler_aligned_length
from .sim import ManipulatorParams, RobotState, forward_kinematics, inverse_kinematics, jacobian, step_dynamics

log = logging.getLogger(__name__)

MAX_SCRIPT_DURATION = 5.0
LEAD_IN = 5.0

MASTER_CHANNELS = [f"{q}_m{j}" for q in ("theta", "dtheta", "tau_res") for j in (1, 2, 3)]
SLAVE_CHANNELS = [f"{q}_s{j}" for q in ("theta", "dtheta", "tau_res") for j in (1, 2, 3)]
REF_CHANNELS = [f"tau_ref_s{j}" for j in (1, 2, 3)]
DEMO_CHANNELS = MASTER_CHANNELS + SLAVE_CHANNELS + REF_CHANNELS


class DemoRejected(RuntimeError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class TaskLayout:
    """Where the ruler sits relative to the robot base."""

    anchor_radius: float = 0.245
    anchor_yaw: float = 0.15
    plane_height: float = -0.015
    edge_heading_deg: float = -60.0
    start_offset: tuple[float, float] = (-0.015, 0.005)  # point 1 relative to point 2
    stroke_length: float = 0.04  # point 2 to point 3
    hover_height: float = 0.01

    @property
    def anchor(self) -> tuple[float, float]:
        return (self.anchor_radius * math.cos(self.anchor_yaw), self.anchor_radius * math.sin(self.anchor_yaw))


def task_world(inclination_deg: float, layout: TaskLayout = TaskLayout(), **world_kw) -> WorldConfig:
    ruler = Ruler(anchor=layout.anchor, inclination_deg=inclination_deg, edge_heading_deg=layout.edge_heading_deg)
    return WorldConfig(plane_height=layout.plane_height, ruler=ruler, **world_kw)


@dataclass(frozen=True)
class DemoScript:
    inclination_deg: float
    point1: tuple[float, float]
    point2: tuple[float, float]
    point3: tuple[float, float]
    plane_height: float = 0.0
    into_ruler: tuple[float, float] = (0.0, 0.0)  # unit in-plane direction pointing into the ruler body
    hover_height: float = 0.01
    hand_stiffness: float = 200.0  # N/m
    hand_damping: float = 4.0  # N s/m
    press_force: float = 0.8  # N
    aim_depth: float = 0.003  # m the hand aims past the ruler edge
    durations: tuple[float, float, float, float] = (1.5, 1.5, 0.3, 1.5)  # descend, draw, dwell, along ruler
    start_jitter: float = 0.005
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.durations) < 0 or self.total_duration > MAX_SCRIPT_DURATION + 1e-12:
            raise ValueError(f"scripted duration {self.total_duration:.3f} s exceeds {MAX_SCRIPT_DURATION} s")

    @property
    def total_duration(self) -> float:
        return float(sum(self.durations))

    def jittered_point1(self) -> np.ndarray:
        rng = np.random.default_rng(self.rng_seed)
        return np.asarray(self.point1) + rng.uniform(-self.start_jitter, self.start_jitter, size=2)

    @cached_property
    def waypoints(self) -> tuple[np.ndarray, ...]:
        """hover, point 1, point 2 and point 3 as 3-D hand targets (2 and 3 aimed into the ruler)."""
        z0 = self.plane_height
        p1 = np.append(self.jittered_point1(), z0)
        hover = p1 + np.array([0.0, 0.0, self.hover_height])
        aim = np.append(np.asarray(self.into_ruler) * self.aim_depth, 0.0)
        return hover, p1, np.append(self.point2, z0) + aim, np.append(self.point3, z0) + aim

    def check_against(self, world: WorldConfig):
        if world.ruler is None:
            return
        if abs(world.ruler.inclination_deg - self.inclination_deg) > 1e-9:
            raise ValueError("world ruler inclination differs from the script")
        d = np.subtract(self.point3, self.point2)
        u = world.ruler.direction
        if abs(d[0] * u[1] - d[1] * u[0]) > 1e-9 * np.linalg.norm(d) or d @ u <= 0:
            raise ValueError("point2 -> point3 must run along the ruler")


def task_script(inclination_deg: float, seed: int = 0, layout: TaskLayout = TaskLayout(), **kw) -> DemoScript:
    world = task_world(inclination_deg, layout)
    p2 = np.asarray(layout.anchor)
    p1 = p2 + np.asarray(layout.start_offset)
    p3 = p2 + layout.stroke_length * world.ruler.direction
    return DemoScript(inclination_deg=inclination_deg, point1=tuple(p1), point2=tuple(p2), point3=tuple(p3),
                      plane_height=layout.plane_height, into_ruler=tuple(-world.ruler.free_normal),
                      hover_height=layout.hover_height, rng_seed=seed, **kw)


def _min_jerk(s: float) -> float:
    s = min(max(s, 0.0), 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def desired_path(t: float, script: DemoScript) -> tuple[np.ndarray, float]:
    """Hand target (3-D) and press weight in [0, 1] at script time t (t < 0 is the lead-in)."""
    hover, p1, p2, p3 = script.waypoints
    t1, t2, td, t3 = script.durations
    if t < 0:
        return hover, 0.0
    if t < t1:
        s = _min_jerk(t / t1)
        return hover + s * (p1 - hover), s
    t -= t1
    if t < t2:
        return p1 + _min_jerk(t / t2) * (p2 - p1), 1.0
    t -= t2
    if t < td:
        return p2, 1.0
    t -= td
    return p2 + _min_jerk(t / t3) * (p3 - p2), 1.0


def operator_force(t: float, master_tip, master_tip_vel, script: DemoScript) -> np.ndarray:
    """Impedance hand: K (p_des - p) - B v, plus a downward press while drawing."""
    target, press = desired_path(t, script)
    f = script.hand_stiffness * (target - np.asarray(master_tip)) - script.hand_damping * np.asarray(master_tip_vel)
    f[2] -= press * script.press_force
    return f


@dataclass
class Demonstration:
    rate: float
    data: np.ndarray  # samples x len(channels)
    channels: list = field(default_factory=lambda: list(DEMO_CHANNELS))
    meta: dict = field(default_factory=dict)

    def channel(self, name: str) -> np.ndarray:
        return self.data[:, self.channels.index(name)]

    def block(self, names) -> np.ndarray:
        return self.data[:, [self.channels.index(n) for n in names]]

    @property
    def duration(self) -> float:
        return len(self.data) / self.rate


@dataclass
class CollectionResult:
    demo: Demonstration
    ink: InkTrace
    drawn_length: float
    slave_tip: np.ndarray  # logged tip positions at the demo rate


def simulate_demo(script: DemoScript, world: WorldConfig, gains: ControllerGains = ControllerGains(),
                  params: ManipulatorParams = ManipulatorParams(), dt: float = 1e-3, rate: float = 100.0,
                  lead_in: float = LEAD_IN, slave_offset=(0.03, -0.03, 0.03)) -> CollectionResult:
    """Run one bilateral teleoperation episode and log it (lead-in removed)."""
    script.check_against(world)
    hover, _ = desired_path(-1.0, script)
    q0 = inverse_kinematics(hover, params, (0.15, 0.35, 0.45))
    master = RobotState.at_rest(q0, params, gains.g)
    slave = RobotState.at_rest(q0 + np.asarray(slave_offset), params, gains.g)

    decim = int(round(1.0 / (rate * dt)))
    n_lead = int(round(lead_in / dt))
    n_total = n_lead + int(round(script.total_duration / dt))
    rows, tips = [], []
    ink = InkTrace()
    normal_forces, wall_forces = [], []
    for k in range(n_total):
        t = (k - n_lead) * dt
        master.observer = observe(master, params, gains, dt)
        slave.observer = observe(slave, params, gains, dt)
        cm, cs = bilateral_tick(master, slave, gains, params, dt)

        jm = jacobian(master.theta, params)
        pm = forward_kinematics(master.theta, params)
        f_op = operator_force(t, pm, jm @ master.theta_dot, script)

        js = jacobian(slave.theta, params)
        ps = forward_kinematics(slave.theta, params)
        c = contact(ps, js @ slave.theta_dot, world)
        record_ink(ink, k * dt, ps, c.normal_force, world)

        if k >= n_lead and (k - n_lead) % decim == 0:
            om, os_ = master.observer, slave.observer
            rows.append(np.concatenate([master.theta, om.velocity, om.tau_res,
                                        slave.theta, os_.velocity, os_.tau_res, cs.ref]))
            tips.append(ps)
            if c.normal_force > 0:
                normal_forces.append(c.normal_force)
            if c.wall_force > 0:
                wall_forces.append(c.wall_force)

        master = step_dynamics(master, cm.motor, jm.T @ f_op, dt, params)
        slave = step_dynamics(slave, cs.motor, js.T @ c.force, dt, params)

    meta = {
        "inclination_deg": script.inclination_deg,
        "seed": script.rng_seed,
        "discarded_lead_in": lead_in,
        "press_force_median": float(np.median(normal_forces)) if normal_forces else 0.0,
        "ruler_force_median": float(np.median(wall_forces)) if wall_forces else 0.0,
    }
    demo = Demonstration(rate=rate, data=np.asarray(rows), meta=meta)
    return CollectionResult(demo, ink, ruler_aligned_length(ink, world), np.asarray(tips))


def validate_demo(result: CollectionResult, world: WorldConfig, params: ManipulatorParams,
                  bounds=None, min_length: float = 0.02, noise_floor: float = 1e-3,
                  min_contact_time: float = 0.5) -> str | None:
    """Return a rejection reason, or None if the demonstration is usable."""
    demo = result.demo
    if not np.isfinite(demo.data).all():
        return "non-finite samples"
    if result.drawn_length < min_length:
        return f"ruler-aligned stroke {result.drawn_length * 100:.2f} cm < {min_length * 100:.1f} cm"
    tau = np.abs(demo.block(SLAVE_CHANNELS[6:9])).max(axis=1)
    if (tau > noise_floor).sum() / demo.rate < min_contact_time:
        return "no sustained contact phase"
    theta = demo.block(MASTER_CHANNELS[:3] + SLAVE_CHANNELS[:3])
    lo, hi = np.tile(params.lower, 2), np.tile(params.upper, 2)
    if ((theta <= lo + 1e-9) | (theta >= hi - 1e-9)).any():
        return "joint limit reached"
    if bounds is not None:
        lo_b, hi_b = bounds
        data = demo.data[:, : len(lo_b)]
        if ((data < lo_b) | (data > hi_b)).any():
            return "channel outside movable range"
    return None


def collect_demo(script: DemoScript, world: WorldConfig, gains: ControllerGains = ControllerGains(),
                 params: ManipulatorParams = ManipulatorParams(), retries: int = 5, bounds=None,
                 **sim_kw) -> CollectionResult:
    """Collect one accepted demonstration, re-seeding on rejection."""
    reasons = []
    for attempt in range(retries + 1):
        seed = script.rng_seed + 7919 * attempt
        s = script if attempt == 0 else _reseed(script, seed)
        result = simulate_demo(s, world, gains, params, **sim_kw)
        reason = validate_demo(result, world, params, bounds)
        if reason is None:
            return result
        log.info("demo at %.0f deg seed %d rejected: %s", script.inclination_deg, seed, reason)
        reasons.append(f"seed {seed}: {reason}")
    raise DemoRejected("; ".join(reasons))


def _reseed(script: DemoScript, seed: int) -> DemoScript:
    d = asdict(script)
    d["rng_seed"] = seed
    return DemoScript(**d)


def collect_corpus(inclinations=(0.0, 30.0, 60.0), per_inclination: int = 5, seed: int = 0,
                   gains: ControllerGains = ControllerGains(), params: ManipulatorParams = ManipulatorParams(),
                   layout: TaskLayout = TaskLayout(), script_kw: dict | None = None,
                   world_kw: dict | None = None, retries: int = 5) -> list[CollectionResult]:
    """Demos for every inclination; demo j of inclination i starts from seed + 100 i + j."""
    results = []
    for i, inc in enumerate(inclinations):
        world = task_world(inc, layout, **(world_kw or {}))
        for j in range(per_inclination):
            s = task_script(inc, seed=seed + 100 * i + j, layout=layout, **(script_kw or {}))
            results.append(collect_demo(s, world, gains, params, retries))
    return results
