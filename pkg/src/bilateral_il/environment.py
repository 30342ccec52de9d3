"""Penalty-contact world on the slave side.

The pedestal is a horizontal writing plane. A ruler is a half-plane wall
standing on it; a protractor is a circular wall. The pen tip is a point.
All forces returned here act on the pen (environment on robot).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonMonotonicTime(ValueError):
    pass


@dataclass(frozen=True)
class Ruler:
    anchor: tuple[float, float]
    inclination_deg: float = 0.0
    side: str = "left"  # which side of the drawing direction the ruler body occupies
    height: float = 0.005
    edge_heading_deg: float = -90.0  # heading of the pedestal edge (0 deg ruler) in the base frame
    # inclination turns the ruler clockwise (seen from above) away from the edge

    def __post_init__(self):
        if not 0.0 <= self.inclination_deg <= 90.0:
            raise ValueError("inclination_deg must lie in [0, 90]")
        if self.side not in ("left", "right"):
            raise ValueError("side must be 'left' or 'right'")

    @property
    def direction(self) -> np.ndarray:
        h = math.radians(self.edge_heading_deg - self.inclination_deg)
        return np.array([math.cos(h), math.sin(h)])

    @property
    def free_normal(self) -> np.ndarray:
        """Unit normal pointing from the ruler body into the free half-plane."""
        u = self.direction
        left = np.array([-u[1], u[0]])
        return -left if self.side == "left" else left


@dataclass(frozen=True)
class Protractor:
    center: tuple[float, float]
    radius: float = 0.05
    height: float = 0.005

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class WorldConfig:
    plane_height: float = 0.0
    ruler: Ruler | None = None
    protractor: Protractor | None = None
    contact_stiffness: float = 2000.0  # N/m
    contact_damping: float = 5.0  # N s/m
    friction_viscous: float = 0.5  # N s/m
    friction_coulomb: float = 0.2
    slip_velocity: float = 1e-3  # m/s, Coulomb regularisation width
    on_ruler_tolerance: float = 0.002  # m

    def __post_init__(self):
        if self.contact_stiffness <= 0 or self.contact_damping < 0:
            raise ValueError("contact stiffness must be > 0 and damping >= 0")
        if self.friction_viscous < 0 or self.friction_coulomb < 0:
            raise ValueError("friction coefficients must be >= 0")


@dataclass
class Contact:
    force: np.ndarray  # total force on the pen, N
    normal_force: float  # paper (plane) normal force, N
    wall_force: float  # ruler/protractor normal force, N
    wall_normal: np.ndarray  # in-plane unit normal of the wall at the tip (free side)


def _wall_geometry(tip_xy, world: WorldConfig):
    """Signed distance to the active wall (positive on the free side) and its normal."""
    if world.ruler is not None:
        r = world.ruler
        n = r.free_normal
        return float((tip_xy - np.asarray(r.anchor)) @ n), n, r.height
    if world.protractor is not None:
        p = world.protractor
        rel = tip_xy - np.asarray(p.center)
        dist = math.hypot(rel[0], rel[1])
        n = rel / dist if dist > 0 else np.array([1.0, 0.0])
        return dist - p.radius, n, p.height
    return math.inf, np.zeros(2), 0.0


def guide_tangent(tip_xy, world: WorldConfig) -> np.ndarray:
    """Unit in-plane tangent of the guide (ruler direction, or CCW arc tangent)."""
    if world.ruler is not None:
        return world.ruler.direction
    if world.protractor is not None:
        _, n, _ = _wall_geometry(np.asarray(tip_xy, dtype=float), world)
        return np.array([-n[1], n[0]])
    raise ValueError("world has no ruler or protractor")


def contact(tip, tip_velocity, world: WorldConfig) -> Contact:
    tip = np.asarray(tip, dtype=float)
    vel = np.asarray(tip_velocity, dtype=float)
    k, b = world.contact_stiffness, world.contact_damping
    force = np.zeros(3)

    fn = 0.0
    depth = world.plane_height - tip[2]
    if depth > 0:
        fn = max(0.0, k * depth - b * vel[2])
        force[2] = fn

    fw = 0.0
    s, n, wall_h = _wall_geometry(tip[:2], world)
    if s < 0 and tip[2] < world.plane_height + wall_h:
        sdot = float(vel[:2] @ n)
        fw = max(0.0, -k * s - b * sdot)
        force[:2] += fw * n

    # friction opposing in-plane sliding; Coulomb part regularised so it
    # fades to zero with the slip velocity instead of reversing it
    v_xy = vel[:2]
    if fn > 0:
        speed = math.hypot(v_xy[0], v_xy[1])
        coulomb = world.friction_coulomb * fn / max(speed, world.slip_velocity)
        force[:2] -= (world.friction_viscous + coulomb) * v_xy
    if fw > 0:
        t = np.array([-n[1], n[0]])
        vt = float(v_xy @ t)
        force[:2] -= world.friction_coulomb * fw * vt / max(abs(vt), world.slip_velocity) * t
    return Contact(force, fn, fw, n)


def contact_force(tip, tip_velocity, world: WorldConfig) -> np.ndarray:
    return contact(tip, tip_velocity, world).force


def guide_distance(point_xy, world: WorldConfig) -> float:
    """Unsigned lateral distance from the ruler line (or protractor circle)."""
    s, _, _ = _wall_geometry(np.asarray(point_xy, dtype=float), world)
    return abs(s)


@dataclass
class InkTrace:
    t: list = field(default_factory=list)
    points: list = field(default_factory=list)
    on_ruler: list = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    def as_array(self) -> np.ndarray:
        """Rows of (t, x, y, on_ruler)."""
        if not self.t:
            return np.zeros((0, 4))
        pts = np.asarray(self.points)
        return np.column_stack([self.t, pts[:, 0], pts[:, 1], np.asarray(self.on_ruler, dtype=float)])


def record_ink(trace: InkTrace, t: float, tip, normal_force: float, world: WorldConfig) -> InkTrace:
    if trace.t and t <= trace.t[-1]:
        raise NonMonotonicTime(f"time {t} is not after {trace.t[-1]}")
    if normal_force > 0:
        p = (float(tip[0]), float(tip[1]))
        on = (world.ruler is not None or world.protractor is not None) and \
            guide_distance(p, world) <= world.on_ruler_tolerance
        trace.t.append(float(t))
        trace.points.append(p)
        trace.on_ruler.append(bool(on))
    return trace


def _runs(trace: InkTrace, max_gap: float):
    """Index ranges of contiguous on-guide samples; pen lifts longer than max_gap break a run."""
    start = None
    for i, on in enumerate(trace.on_ruler):
        broken = start is not None and (not on or trace.t[i] - trace.t[i - 1] > max_gap)
        if broken:
            yield start, i
            start = None
        if on and start is None:
            start = i
    if start is not None:
        yield start, len(trace.on_ruler)


def ruler_aligned_length(trace: InkTrace, world: WorldConfig, max_gap: float = 0.05) -> float:
    """Extent of the longest contiguous on-guide stroke.

    For a ruler this is the span of the stroke projected on the ruler
    direction; for a protractor the swept arc length.
    """
    if not trace.t:
        return 0.0
    pts = np.asarray(trace.points)
    if world.ruler is not None:
        coord = (pts - np.asarray(world.ruler.anchor)) @ world.ruler.direction
    elif world.protractor is not None:
        rel = pts - np.asarray(world.protractor.center)
        coord = np.unwrap(np.arctan2(rel[:, 1], rel[:, 0])) * world.protractor.radius
    else:
        return 0.0
    best = 0.0
    for a, b in _runs(trace, max_gap):
        seg = coord[a:b]
        best = max(best, float(seg.max() - seg.min()))
    return best


class StrokeMeter:
    """Running value of ruler_aligned_length while a trace is being recorded."""

    def __init__(self, world: WorldConfig, max_gap: float = 0.05):
        self.world = world
        self.max_gap = max_gap
        self.best = 0.0
        self._last_t = None
        self._last_angle = None
        self._angle_offset = 0.0
        self._run = None  # (min, max) of the open run

    def _coord(self, p) -> float:
        w = self.world
        if w.ruler is not None:
            return float((p - np.asarray(w.ruler.anchor)) @ w.ruler.direction)
        rel = p - np.asarray(w.protractor.center)
        a = math.atan2(rel[1], rel[0])
        if self._last_angle is not None:
            # same branch choice as np.unwrap on consecutive samples
            d = a + self._angle_offset - self._last_angle
            if abs(d) > math.pi:
                self._angle_offset -= 2 * math.pi * math.floor((d + math.pi) / (2 * math.pi))
        self._last_angle = a + self._angle_offset
        return self._last_angle * w.protractor.radius

    def add(self, t: float, point, on: bool) -> float:
        if self.world.ruler is None and self.world.protractor is None:
            return 0.0
        c = self._coord(np.asarray(point, dtype=float))
        gap = self._last_t is not None and t - self._last_t > self.max_gap
        self._last_t = t
        if self._run is not None and (not on or gap):
            self._run = None
        if on:
            lo, hi = self._run if self._run is not None else (c, c)
            self._run = (min(lo, c), max(hi, c))
            self.best = max(self.best, self._run[1] - self._run[0])
        return self.best
