"""Track geometry, scene objects and unicycle kinematics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from advloop.control import ControlCommand


class ObjectKind(IntEnum):
    """Object classes; values double as detector class ids."""

    VEHICLE = 0
    STOP_SIGN = 1
    TRAFFIC_LIGHT = 2
    INTERSECTION = 3


CLASS_NAMES = ("vehicle", "stop_sign", "traffic_light", "intersection")
NUM_CLASSES = len(CLASS_NAMES)

# Billboard geometry per kind: (width m, height m, base elevation m, lateral offset m)
OBJECT_GEOMETRY = {
    ObjectKind.VEHICLE: (0.10, 0.10, 0.0, 0.0),
    ObjectKind.STOP_SIGN: (0.08, 0.14, 0.05, -0.14),
    ObjectKind.TRAFFIC_LIGHT: (0.06, 0.14, 0.08, -0.14),
    ObjectKind.INTERSECTION: (0.20, 0.05, 0.0, 0.0),
}
# Signs and lights stand this far past their line, along the approach direction.
SIGN_SETBACK = 0.21


class SceneError(ValueError):
    """Raised for invalid geometry or failed scene sampling."""


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.remainder(angle, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    time: float = 0.0


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class TrafficLightSpec:
    """Light placed at arc-length ``s`` with a red/green cycle starting red at t=0."""

    s: float
    red_duration: float = 6.0
    green_duration: float = 6.0

    def state_at(self, t: float) -> str:
        period = self.red_duration + self.green_duration
        return "red" if (t % period) < self.red_duration else "green"


@dataclass(frozen=True)
class SceneObject:
    kind: ObjectKind
    pose: Pose
    size: tuple[float, float]
    light_state: str = "none"
    elevation: float = 0.0

    def __post_init__(self):
        if self.light_state not in ("red", "green", "none"):
            raise SceneError(f"unknown light state {self.light_state!r}")
        if (self.light_state != "none") != (self.kind == ObjectKind.TRAFFIC_LIGHT):
            raise SceneError("light_state must be set exactly for traffic lights")


@dataclass(frozen=True, eq=False)
class TrackSpec:
    """Closed centerline polyline driven counter-clockwise.

    Stop lines and the traffic light are given as arc-length positions along
    the centerline, measured from vertex 0.
    """

    centerline: np.ndarray
    lane_width: float
    stop_lines: tuple[float, ...]
    traffic_light: TrafficLightSpec
    _seg_start: np.ndarray = field(init=False, repr=False)
    _seg_vec: np.ndarray = field(init=False, repr=False)
    _seg_len: np.ndarray = field(init=False, repr=False)
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise SceneError("centerline must be an (N>=3, 2) array of points")
        if np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        if not np.all(np.isfinite(pts)):
            raise SceneError("centerline has non-finite points")
        if not self.lane_width > 0:
            raise SceneError("lane_width must be positive")
        if len(self.stop_lines) != 3:
            raise SceneError("exactly 3 stop lines are required")
        vec = np.roll(pts, -1, axis=0) - pts
        seg_len = np.hypot(vec[:, 0], vec[:, 1])
        if np.any(seg_len <= 0):
            raise SceneError("centerline has repeated points")
        if _self_intersects(pts):
            raise SceneError("centerline self-intersects")
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "stop_lines", tuple(float(s) for s in self.stop_lines))
        object.__setattr__(self, "_seg_start", pts)
        object.__setattr__(self, "_seg_vec", vec)
        object.__setattr__(self, "_seg_len", seg_len)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(seg_len)]))
        for s in (*self.stop_lines, self.traffic_light.s):
            if not 0 <= s < self.lap_length:
                raise SceneError(f"arc position {s} outside [0, lap_length)")

    @property
    def lap_length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, s: float) -> Pose:
        """Centerline pose at arc-length ``s`` (wrapped)."""
        s = s % self.lap_length
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        t = (s - self._cum[i]) / self._seg_len[i]
        p = self._seg_start[i] + t * self._seg_vec[i]
        return Pose(float(p[0]), float(p[1]), math.atan2(self._seg_vec[i, 1], self._seg_vec[i, 0]))

    def project(self, x: float, y: float) -> tuple[int, float, float]:
        """Project a point on the nearest segment.

        Returns (segment index, arc-length of the foot point, signed distance),
        distance positive to the left of travel. Ties go to the lowest index.
        """
        idx, s, d = self.project_many(np.array([[x, y]], dtype=np.float64))
        return int(idx[0]), float(s[0]), float(d[0])

    def project_many(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rel = pts[:, None, :] - self._seg_start[None, :, :]
        t = np.einsum("psk,sk->ps", rel, self._seg_vec) / self._seg_len**2
        t = np.clip(t, 0.0, 1.0)
        foot = self._seg_start[None] + t[..., None] * self._seg_vec[None]
        diff = pts[:, None, :] - foot
        dist2 = np.einsum("psk,psk->ps", diff, diff)
        idx = np.argmin(dist2, axis=1)  # first minimum wins
        rows = np.arange(len(pts))
        cross = self._seg_vec[idx, 0] * rel[rows, idx, 1] - self._seg_vec[idx, 1] * rel[rows, idx, 0]
        dist = np.sqrt(dist2[rows, idx])
        signed = np.where(cross < 0, -dist, dist)
        s = self._cum[idx] + t[rows, idx] * self._seg_len[idx]
        return idx, s, signed

    def distance_many(self, pts: np.ndarray) -> np.ndarray:
        """Unsigned distance from each point to the centerline."""
        return np.abs(self.project_many(pts)[2])


def _self_intersects(pts: np.ndarray) -> bool:
    n = len(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    for i in range(n):
        a1, a2 = pts[i], pts[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue  # adjacent via wrap-around
            b1, b2 = pts[j], pts[(j + 1) % n]
            d1, d2 = cross(b1, b2, a1), cross(b1, b2, a2)
            d3, d4 = cross(a1, a2, b1), cross(a1, a2, b2)
            if d1 * d2 < 0 and d3 * d4 < 0:
                return True
    return False


def rect_track(
    length: float = 3.0,
    width: float = 2.0,
    fillet: float = 0.1,
    lane_width: float = 0.2,
    stop_offset: float = 0.35,
    arc_points: int = 6,
    red_duration: float = 6.0,
    green_duration: float = 6.0,
) -> TrackSpec:
    """Rectangular loop with rounded corners, driven counter-clockwise from (fillet, 0).

    Stop lines sit ``stop_offset`` metres before the fillet of the first three
    corners; the traffic light guards the fourth corner the same way.
    """
    corners = [(length, 0.0), (length, width), (0.0, width), (0.0, 0.0)]
    headings = [0.0, math.pi / 2, math.pi, -math.pi / 2]
    pts = []
    for (cx, cy), h in zip(corners, headings):
        # arc centre lies to the left of the incoming direction
        ox = cx - fillet * math.cos(h) - fillet * math.sin(h)
        oy = cy - fillet * math.sin(h) + fillet * math.cos(h)
        for k in range(arc_points + 1):
            a = h - math.pi / 2 + (math.pi / 2) * k / arc_points
            pts.append((ox + fillet * math.cos(a), oy + fillet * math.sin(a)))
    pts = pts[-1:] + pts[:-1]  # start at (fillet, 0) on the bottom edge
    centerline = np.array(pts)
    straight_bottom = length - 2 * fillet
    straight_side = width - 2 * fillet
    arc_len = np.hypot(*(centerline[1] - centerline[2])) * arc_points  # chord sum of one fillet
    sides = [straight_bottom, straight_side, straight_bottom, straight_side]
    ends = np.cumsum([side + arc_len for side in sides]) - arc_len
    lines = [float(e - stop_offset) for e in ends]
    return TrackSpec(
        centerline=centerline,
        lane_width=lane_width,
        stop_lines=tuple(lines[:3]),
        traffic_light=TrafficLightSpec(lines[3], red_duration, green_duration),
    )


TRACK_PRESETS = {"rect-3x2": rect_track}


def step_kinematics(state: VehicleState, cmd: ControlCommand, dt: float) -> VehicleState:
    """Explicit-Euler unicycle step; position uses the pre-update heading."""
    values = (state.x, state.y, state.heading, state.time, cmd.v, cmd.omega, dt)
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite kinematics input: state={state}, cmd=({cmd.v}, {cmd.omega}), dt={dt}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return VehicleState(
        x=state.x + cmd.v * math.cos(state.heading) * dt,
        y=state.y + cmd.v * math.sin(state.heading) * dt,
        heading=normalize_angle(state.heading + cmd.omega * dt),
        time=state.time + dt,
    )


def lateral_deviation(state: VehicleState, track: TrackSpec) -> float:
    """Signed distance to the centerline, positive left of travel."""
    return track.project(state.x, state.y)[2]


def arc_position(state: VehicleState, track: TrackSpec) -> float:
    return track.project(state.x, state.y)[1]


def nearest_stop_zone(
    state: VehicleState, track: TrackSpec, lookahead: float = 1.0
) -> tuple[int, float] | None:
    """Next stop line (1-based index) within ``lookahead`` metres of arc-length."""
    s = arc_position(state, track)
    best = None
    for i, line in enumerate(track.stop_lines, start=1):
        ahead = (line - s) % track.lap_length
        if ahead > track.lap_length - 1e-9:
            ahead = 0.0
        if ahead <= lookahead and (best is None or ahead < best[1]):
            best = (i, ahead)
    return best


def _line_object_pose(track: TrackSpec, s: float, lateral: float, setback: float) -> Pose:
    p = track.point_at(s)
    x = p.x + setback * math.cos(p.theta) - lateral * math.sin(p.theta)
    y = p.y + setback * math.sin(p.theta) + lateral * math.cos(p.theta)
    return Pose(x, y, p.theta)


def _make_object(kind: ObjectKind, pose: Pose, light_state: str = "none") -> SceneObject:
    w, h, base, _ = OBJECT_GEOMETRY[kind]
    return SceneObject(kind, pose, (w, h), light_state, base)


def static_objects(track: TrackSpec, light_state: str) -> list[SceneObject]:
    """Stop signs, the traffic light and an intersection marker at every line."""
    objs = []
    lat_sign = OBJECT_GEOMETRY[ObjectKind.STOP_SIGN][3]
    lat_light = OBJECT_GEOMETRY[ObjectKind.TRAFFIC_LIGHT][3]
    for s in track.stop_lines:
        objs.append(_make_object(ObjectKind.STOP_SIGN, _line_object_pose(track, s, lat_sign, SIGN_SETBACK)))
        objs.append(_make_object(ObjectKind.INTERSECTION, _line_object_pose(track, s, 0.0, 0.0)))
    s = track.traffic_light.s
    objs.append(
        _make_object(ObjectKind.TRAFFIC_LIGHT, _line_object_pose(track, s, lat_light, SIGN_SETBACK), light_state)
    )
    objs.append(_make_object(ObjectKind.INTERSECTION, _line_object_pose(track, s, 0.0, 0.0)))
    return objs


@dataclass(frozen=True, eq=False)
class Scene:
    track: TrackSpec
    objects: tuple[SceneObject, ...]
    viewpoint: VehicleState

    def same_as(self, other: Scene) -> bool:
        return self.track is other.track and self.objects == other.objects and self.viewpoint == other.viewpoint


def sample_scene(
    rng_seed: int | np.random.SeedSequence,
    track: TrackSpec,
    max_vehicles: int = 3,
    max_retries: int = 200,
) -> Scene:
    """Random viewpoint, light state and 0..max_vehicles parked-in-lane vehicles.

    Half of the viewpoints are drawn on the approach to a line so near signs
    and lights are well represented.
    """
    rng = np.random.default_rng(rng_seed)
    lines = [*track.stop_lines, track.traffic_light.s]
    if rng.random() < 0.5:
        s0 = rng.uniform(0.0, track.lap_length)
    else:
        s0 = lines[rng.integers(len(lines))] - rng.uniform(-0.05, 1.2)
    base = track.point_at(s0)
    off = rng.uniform(-0.05, 0.05)
    view = VehicleState(
        base.x - off * math.sin(base.theta),
        base.y + off * math.cos(base.theta),
        normalize_angle(base.theta + rng.uniform(-0.2, 0.2)),
    )
    light = "red" if rng.random() < 0.5 else "green"
    objs = static_objects(track, light)
    n_veh = int(rng.integers(0, max_vehicles + 1))
    placed: list[tuple[float, float]] = []
    others = [(o.pose.x, o.pose.y) for o in objs if o.kind != ObjectKind.INTERSECTION]
    for _ in range(n_veh):
        for _attempt in range(max_retries):
            s = s0 + rng.uniform(0.3, 2.0)
            p = track.point_at(s)
            lat = rng.uniform(-0.04, 0.04)
            x, y = p.x - lat * math.sin(p.theta), p.y + lat * math.cos(p.theta)
            clear = all(math.hypot(x - a, y - b) >= 0.25 for a, b in placed + others)
            if clear and math.hypot(x - view.x, y - view.y) >= 0.3:
                placed.append((x, y))
                objs.append(_make_object(ObjectKind.VEHICLE, Pose(x, y, p.theta)))
                break
        else:
            raise SceneError(f"could not place vehicle {len(placed) + 1} after {max_retries} retries")
    return Scene(track, tuple(objs), view)
