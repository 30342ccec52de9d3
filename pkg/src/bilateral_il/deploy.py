"""Closed-loop execution of trained networks on the slave, failure detection and evaluation.

The network runs on a 20 ms tick; between ticks its output is held (zero-order
hold) while the slave control loop runs at 1 kHz. Model 1 outputs the slave
torque reference directly. Model 2 outputs master angle, rate and reaction
torque, which drive the same tracking law used during collection.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .control import ControllerGains, command_tracking_tick, observe, reference_tick
from .environment import InkTrace, Protractor, StrokeMeter, WorldConfig, contact, guide_tangent, record_ink, \
    ruler_aligned_length
from .operator import TaskLayout, desired_path, task_script, task_world
from .rnn import HiddenState, NetworkParams, forward_step
from .sim import ManipulatorParams, RobotState, forward_kinematics, inverse_kinematics, jacobian, step_dynamics

log = logging.getLogger(__name__)

FAILURE_MODES = ("none", "torque_divergence", "contact_loss", "stuck_against_ruler", "timeout")
M1_TORQUE_CLAMP = np.array([0.020, 0.025, 0.015])  # Nm, per joint
EVAL_SEED_BASE = 10_000  # keeps evaluation start poses apart from the demo seeds


@dataclass(frozen=True)
class EpisodeConfig:
    duration: float = 10.0
    dt: float = 1e-3
    tick: float = 0.02
    success_length: float = 0.02
    history: float = 0.5  # s of trajectory the failure detector looks at
    divergence_fraction: float = 0.9
    divergence_speed: float = 2e-3  # m/s mean tip speed
    stuck_factor: float = 3.0
    stuck_progress: float = 1e-3  # m
    m1_clamp: bool = True
    stop_on_success: bool = True


@dataclass
class EpisodeReport:
    model: str
    inclination_deg: float | None
    seed: int
    success: bool
    drawn_length: float
    failure_mode: str
    end_time: float
    protractor: bool = False
    label: str = ""
    log: dict = field(default_factory=dict, repr=False)
    ink: InkTrace = field(default_factory=InkTrace, repr=False)

    def __post_init__(self):
        if self.failure_mode not in FAILURE_MODES:
            raise ValueError(f"unknown failure mode {self.failure_mode}")
        if self.success != (self.failure_mode == "none"):
            raise ValueError("success must coincide with failure_mode == 'none'")

    def row(self) -> dict:
        return {"model": self.model, "label": self.label or self.model,
                "inclination_deg": "protractor" if self.protractor else self.inclination_deg, "seed": self.seed,
                "success": int(self.success), "drawn_length": repr(self.drawn_length), "failure_mode": self.failure_mode, "end_time": repr(self.end_time)}


@dataclass
class TrajectoryWindow:
    """Recent per-step samples handed to the failure detector."""

    dt: float
    at_clamp: np.ndarray  # bool per step: some joint reference at (or past) its clamp
    tip_speed: np.ndarray
    normal_force: np.ndarray
    wall_force: np.ndarray
    progress: np.ndarray  # tip coordinate along the guide tangent, m
    contact_before: bool  # pen touched the paper before this window began


def detect_failure(w: TrajectoryWindow, cfg: EpisodeConfig = EpisodeConfig(), press_force: float = 0.5) -> str:
    n = len(w.at_clamp)
    if n * w.dt < cfg.history - 1e-9:
        raise ValueError(f"need at least {cfg.history} s of history")
    if w.at_clamp.mean() > cfg.divergence_fraction and w.tip_speed.mean() > cfg.divergence_speed:
        return "torque_divergence"
    if np.median(w.wall_force) > cfg.stuck_factor * press_force and np.ptp(w.progress) < cfg.stuck_progress:
        return "stuck_against_ruler"
    if w.contact_before and np.all(w.normal_force <= 0):
        return "contact_loss"
    return "none"


def start_pose(inclination_deg: float, seed: int, layout: TaskLayout, params: ManipulatorParams) -> np.ndarray:
    """Hover pose above a jittered point 1, as at the start of a demonstration."""
    script = task_script(inclination_deg, seed=EVAL_SEED_BASE + seed, layout=layout)
    hover, _ = desired_path(-1.0, script)
    return inverse_kinematics(hover, params, (0.15, 0.35, 0.45))


def protractor_world(layout: TaskLayout = TaskLayout(), radius: float = 0.05, reference_inclination: float = 30.0,
                     **world_kw) -> WorldConfig:
    """Disc whose rim touches the reference ruler edge at point 2, lying on the ruler-body side."""
    ruler = task_world(reference_inclination, layout).ruler
    center = np.asarray(layout.anchor) - radius * ruler.free_normal
    return WorldConfig(plane_height=layout.plane_height, protractor=Protractor(tuple(center), radius), **world_kw)


@dataclass
class _Buffers:
    n: int
    at_clamp: np.ndarray = None
    tip_speed: np.ndarray = None
    normal_force: np.ndarray = None
    wall_force: np.ndarray = None
    progress: np.ndarray = None

    def __post_init__(self):
        self.at_clamp = np.zeros(self.n, dtype=bool)
        for name in ("tip_speed", "normal_force", "wall_force", "progress"):
            setattr(self, name, np.zeros(self.n))


def run_episode(net: NetworkParams, world: WorldConfig, q0, seed: int = 0, inclination_deg: float | None = None,
                gains: ControllerGains = ControllerGains(), params: ManipulatorParams = ManipulatorParams(),
                cfg: EpisodeConfig = EpisodeConfig()) -> EpisodeReport:
    """Run one autonomous episode of either model variant."""
    if net.norm is None:
        raise ValueError("network carries no normalisation ranges")
    variant = net.variant
    dt = cfg.dt
    stride = int(round(cfg.tick / dt))
    n_steps = int(round(cfg.duration / dt))
    n_hist = int(round(cfg.history / dt))
    press = float(net.meta.get("ruler_force_median", 0.5)) or 0.5
    clamp = M1_TORQUE_CLAMP if variant == "M1" else None

    slave = RobotState.at_rest(q0, params, gains.g)
    hidden = HiddenState.zeros(net)
    buf = _Buffers(n_steps)
    ink = InkTrace()
    meter = StrokeMeter(world)
    tangent0 = None
    first_contact = None
    out = np.zeros(net.sizes[3])
    cols = {k: [] for k in ("t", "theta", "velocity", "tau_res", "output", "tau_ref", "tip")}
    mode, success, length, k = "timeout", False, 0.0, 0

    for k in range(n_steps):
        t = k * dt
        slave.observer = observe(slave, params, gains, dt)
        ob = slave.observer
        if k % stride == 0:
            x = np.concatenate([slave.theta, ob.velocity, ob.tau_res])
            y, hidden = forward_step(net, hidden, np.clip(net.norm.norm_inputs(x), 0.0, 1.0))
            if variant == "M2" or cfg.m1_clamp:
                y = np.clip(y, 0.0, 1.0)
            out = net.norm.denorm_outputs(y)
        if variant == "M1":
            ref = np.clip(out, -clamp, clamp) if cfg.m1_clamp else out
            cmd = reference_tick(slave, ref, params)
            buf.at_clamp[k] = bool(np.any(np.abs(out) >= clamp * (1 - 1e-9)))
        else:
            cmd = command_tracking_tick(slave, out[:3], out[3:6], out[6:9], gains, params)
            buf.at_clamp[k] = cmd.saturated

        jac = jacobian(slave.theta, params)
        tip = forward_kinematics(slave.theta, params)
        tip_vel = jac @ slave.theta_dot
        c = contact(tip, tip_vel, world)
        n_ink = len(ink)
        record_ink(ink, t, tip, c.normal_force, world)
        if len(ink) > n_ink:
            length = meter.add(t, ink.points[-1], ink.on_ruler[-1])
        if tangent0 is None:
            tangent0 = guide_tangent(tip[:2], world)
        buf.tip_speed[k] = math.sqrt(float(tip_vel @ tip_vel))
        buf.normal_force[k] = c.normal_force
        buf.wall_force[k] = c.wall_force
        buf.progress[k] = float(tip[:2] @ guide_tangent(tip[:2], world)) if world.ruler is not None else \
            float(tip[:2] @ tangent0)
        if first_contact is None and c.normal_force > 0:
            first_contact = t

        if k % stride == 0:
            cols["t"].append(t)
            cols["theta"].append(slave.theta.copy())
            cols["velocity"].append(ob.velocity.copy())
            cols["tau_res"].append(ob.tau_res.copy())
            cols["output"].append(out.copy())
            cols["tau_ref"].append(cmd.ref.copy())
            cols["tip"].append(tip)

        slave = step_dynamics(slave, cmd.motor, jac.T @ c.force, dt, params)

        if (k + 1) % stride == 0:
            if length >= cfg.success_length:
                success, mode = True, "none"
                if cfg.stop_on_success:
                    break
            if k + 1 >= n_hist:
                sl = slice(k + 1 - n_hist, k + 1)
                win = TrajectoryWindow(dt, buf.at_clamp[sl], buf.tip_speed[sl], buf.normal_force[sl],
                                       buf.wall_force[sl], buf.progress[sl],
                                       first_contact is not None and first_contact < (k + 1 - n_hist) * dt)
                found = detect_failure(win, cfg, press)
                if found != "none" and not success:
                    mode = found
                    break

    length = ruler_aligned_length(ink, world)
    if not success and length >= cfg.success_length and mode == "timeout":
        success, mode = True, "none"
    log_arrays = {k2: np.asarray(v) for k2, v in cols.items()}
    return EpisodeReport(variant, inclination_deg, seed, success, length, mode, (k + 1) * dt,
                         protractor=world.protractor is not None, label=net.meta.get("label", variant),
                         log=log_arrays, ink=ink)


def run_model1_episode(net, world, q0, **kw) -> EpisodeReport:
    if net.variant != "M1":
        raise ValueError("model-1 episode needs M1 parameters")
    return run_episode(net, world, q0, **kw)


def run_model2_episode(net, world, q0, **kw) -> EpisodeReport:
    if net.variant != "M2":
        raise ValueError("model-2 episode needs M2 parameters")
    return run_episode(net, world, q0, **kw)


# ---------------------------------------------------------------------------
# evaluation grid


@dataclass(frozen=True)
class EvalTask:
    net_index: int
    inclination_deg: float
    seed: int


def _run_task(args):
    nets, task, layout, gains, params, cfg, world_kw = args
    net = nets[task.net_index]
    world = task_world(task.inclination_deg, layout, **world_kw)
    q0 = start_pose(task.inclination_deg, task.seed, layout, params)
    rep = run_episode(net, world, q0, task.seed, task.inclination_deg, gains, params, cfg)
    rep.log = {}  # keep grid results light; single episodes retain their logs
    return rep


def evaluate(nets: list[NetworkParams], inclinations=(15.0, 45.0), seeds: int = 20,
             layout: TaskLayout = TaskLayout(), gains: ControllerGains = ControllerGains(),
             params: ManipulatorParams = ManipulatorParams(), cfg: EpisodeConfig = EpisodeConfig(),
             world_kw: dict | None = None, jobs: int = 1) -> tuple[list[dict], list[EpisodeReport]]:
    """Run every (network, inclination, seed) episode.

    Returns the summary rows (one per network and inclination) and the
    per-episode reports, both ordered by (network, inclination, seed).
    """
    tasks = [EvalTask(i, float(inc), s) for i in range(len(nets)) for inc in inclinations for s in range(seeds)]
    args = [(nets, t, layout, gains, params, cfg, world_kw or {}) for t in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_task, args))
    else:
        reports = [_run_task(a) for a in args]
    rows = []
    for i, net in enumerate(nets):
        for inc in inclinations:
            cell = [r for t, r in zip(tasks, reports) if t.net_index == i and t.inclination_deg == float(inc)]
            counts = {m: sum(r.failure_mode == m for r in cell) for m in FAILURE_MODES}
            rows.append({"model": net.variant, "label": net.meta.get("label", net.variant),
                         "inclination_deg": float(inc), "episodes": len(cell),
                         "success_rate": sum(r.success for r in cell) / len(cell), **counts})
    return rows, reports


def table_v(rows: list[dict], inclinations=(15.0, 45.0)) -> list[dict]:
    """Model x inclination success rates in the 4-row layout (model 1 and 2 at each inclination)."""
    out = []
    for inc in inclinations:
        for model in ("M1", "M2"):
            match = [r for r in rows if r["model"] == model and r["inclination_deg"] == float(inc)
                     and r.get("label", model) == model]
            if match:
                out.append({"model": model[1], "inclination": f"{inc:g} degree",
                            "success_rate": f"{100 * match[0]['success_rate']:.0f}%"})
    return out


def write_reports_csv(path, reports: list[EpisodeReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(reports[0].row()) if reports else ["model"], lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_rows_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["model"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# ---------------------------------------------------------------------------
# protractor experiment


@dataclass
class ForceDecomposition:
    """Tip-space vectors at logged ticks where the pen touches the protractor rim."""

    t: np.ndarray
    tip: np.ndarray  # position response
    position_command: np.ndarray  # FK of the commanded angles
    force_command: np.ndarray  # force the slave is told to exert on the environment
    force_response: np.ndarray  # force the slave is estimated to exert
    tangent: np.ndarray  # local in-plane rim tangent

    @property
    def position_displacement(self) -> np.ndarray:
        return self.position_command - self.tip

    def mean_angles(self) -> tuple[float, float]:
        """Mean in-plane angle (deg, 0..90) of the force command and of the position-command
        displacement to the rim tangent."""
        def ang(v):
            v = v[:, :2]
            cos = np.abs(np.einsum("ij,ij->i", v, self.tangent)) / np.maximum(np.linalg.norm(v, axis=1), 1e-15)
            return float(np.degrees(np.arccos(np.clip(cos, 0.0, 1.0))).mean())
        if len(self.t) == 0:
            return math.nan, math.nan
        return ang(self.force_command), ang(self.position_displacement)

    def rows(self):
        for i in range(len(self.t)):
            yield [self.t[i], *self.tip[i], *self.position_command[i], *self.force_command[i],
                   *self.force_response[i], *self.tangent[i]]

    def write_csv(self, path) -> None:
        head = ["t", "tip_x", "tip_y", "tip_z", "pcmd_x", "pcmd_y", "pcmd_z", "fcmd_x", "fcmd_y", "fcmd_z",
                "fres_x", "fres_y", "fres_z", "tan_x", "tan_y"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(head)
            for r in self.rows():
                w.writerow([repr(float(v)) for v in r])


def decompose(report: EpisodeReport, world: WorldConfig, params: ManipulatorParams = ManipulatorParams()
              ) -> ForceDecomposition:
    """Map the logged model-2 commands and responses to tip space at rim-contact ticks."""
    lg = report.log
    keep = []
    for i, (th, tip) in enumerate(zip(lg["theta"], lg["tip"])):
        c = contact(tip, np.zeros(3), world)
        if c.wall_force > 0 and c.normal_force > 0:
            keep.append(i)
    t, tips, pc, fc, fr, tan = [], [], [], [], [], []
    for i in keep:
        th = lg["theta"][i]
        jt_pinv = np.linalg.pinv(jacobian(th, params).T)
        cmd = lg["output"][i]
        t.append(lg["t"][i])
        tips.append(lg["tip"][i])
        pc.append(forward_kinematics(cmd[:3], params))
        # commands are master reaction torques; the slave should exert the opposite
        fc.append(-jt_pinv @ cmd[6:9])
        fr.append(jt_pinv @ lg["tau_res"][i])
        tan.append(guide_tangent(lg["tip"][i][:2], world))
    z3, z2 = np.zeros((0, 3)), np.zeros((0, 2))
    return ForceDecomposition(np.asarray(t), np.asarray(tips) if tips else z3, np.asarray(pc) if pc else z3,
                              np.asarray(fc) if fc else z3, np.asarray(fr) if fr else z3,
                              np.asarray(tan) if tan else z2)


def protractor_episode(net: NetworkParams, seed: int = 0, world: WorldConfig | None = None,
                       layout: TaskLayout = TaskLayout(), reference_inclination: float = 30.0,
                       gains: ControllerGains = ControllerGains(), params: ManipulatorParams = ManipulatorParams(),
                       cfg: EpisodeConfig = EpisodeConfig()) -> tuple[EpisodeReport, ForceDecomposition]:
    if net.variant != "M2":
        raise ValueError("the protractor experiment uses model 2")
    world = world or protractor_world(layout, reference_inclination=reference_inclination)
    q0 = start_pose(reference_inclination, seed, layout, params)
    rep = run_episode(net, world, q0, seed, None, gains, params, cfg)
    return rep, decompose(rep, world, params)


def config_dict(cfg: EpisodeConfig) -> dict:
    return asdict(cfg)
