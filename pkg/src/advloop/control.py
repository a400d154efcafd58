"""Cloud-side decision making: lane estimate from pixels, PID steering, rule logic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from advloop.perception import Detection
from advloop.render import DEFAULT_PALETTE
from advloop.scene import ObjectKind

NO_LANE = "no-lane"
MODES = ("cruise", "stopping", "waiting_light")


@dataclass(frozen=True)
class ControlCommand:
    v: float
    omega: float
    seq: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.v) and math.isfinite(self.omega)):
            raise ValueError("command must be finite")
        if not 0 <= self.seq < 2**32:
            raise ValueError("seq must fit in u32")


@dataclass(frozen=True)
class PidGains:
    kp: float = 3.0
    ki: float = 0.0
    kd: float = 0.3
    integral_limit: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(g) for g in (self.kp, self.ki, self.kd)):
            raise ValueError("gains must be finite")
        if not self.integral_limit > 0:
            raise ValueError("integral_limit must be positive")


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    prev_error: float = 0.0
    initialized: bool = False


def pid_step(gains: PidGains, state: PidState, error: float, dt: float) -> tuple[float, PidState]:
    """One PID update with a clamped integral; no derivative kick on the first call."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    lim = gains.integral_limit
    integral = min(max(state.integral + error * dt, -lim), lim)
    deriv = (error - state.prev_error) / dt if state.initialized else 0.0
    u = gains.kp * error + gains.ki * integral + gains.kd * deriv
    return u, PidState(integral, error, True)


def estimate_lane_deviation(
    image: np.ndarray,
    lane_color=DEFAULT_PALETTE["lane"],
    tolerance: float = 0.15,
    min_pixels: int = 10,
) -> float | str:
    """Centroid of lane-coloured pixels in the lower half, as an offset in [-1, 1].

    Positive means the markings sit right of centre. Returns ``"no-lane"`` when
    fewer than ``min_pixels`` pixels qualify.
    """
    h, w = image.shape[:2]
    lower = image[h // 2 :]
    mask = np.all(np.abs(lower - np.asarray(lane_color)) < tolerance, axis=-1)
    if mask.sum() < min_pixels:
        return NO_LANE
    cols = np.nonzero(mask)[1]
    dev = (cols.mean() - w / 2) / (w / 2)
    return float(min(max(dev, -1.0), 1.0))


def light_color(
    image: np.ndarray,
    box,
    palette: dict = DEFAULT_PALETTE,
    tolerance: float = 0.2,
) -> str:
    """Read the lamp colour inside a traffic-light box: ``red``, ``green`` or ``none``."""
    h, w = image.shape[:2]
    cx, cy, bw, bh = box
    c0, c1 = max(int(math.floor((cx - bw / 2) * w)), 0), min(int(math.ceil((cx + bw / 2) * w)), w)
    r0, r1 = max(int(math.floor((cy - bh / 2) * h)), 0), min(int(math.ceil((cy + bh / 2) * h)), h)
    patch = image[r0:r1, c0:c1]
    if patch.size == 0:
        return "none"
    counts = {}
    for name in ("red", "green"):
        ref = np.asarray(palette[f"lamp_{name}"])
        counts[name] = int(np.all(np.abs(patch - ref) < tolerance, axis=-1).sum())
    if max(counts.values()) == 0:
        return "none"
    return max(counts, key=lambda k: (counts[k], k == "red"))


def annotate_lights(image: np.ndarray, detections: list[Detection]) -> list[Detection]:
    """Fill ``light_state`` of traffic-light detections from the image pixels."""
    return [
        replace(d, light_state=light_color(image, d.box)) if d.class_id == ObjectKind.TRAFFIC_LIGHT else d
        for d in detections
    ]


@dataclass(frozen=True)
class ControlSettings:
    v_cruise: float = 0.3
    v_max: float = 0.5
    omega_max: float = 4.0
    stop_confidence: float = 0.5
    near_height: float = 0.25
    light_near_height: float = 0.2
    stop_duration: float = 2.0
    cooldown: float = 10.0
    cooldown_clear: float = 1.0
    gains: PidGains = PidGains()

    def __post_init__(self):
        if not 0 <= self.v_cruise <= self.v_max:
            raise ValueError("v_cruise must lie in [0, v_max]")
        if self.omega_max <= 0 or self.stop_duration < 0 or self.cooldown < 0:
            raise ValueError("omega_max must be positive; durations non-negative")


@dataclass(frozen=True)
class RuleState:
    """Decision state.

    ``cooldown`` blocks re-triggering on the stop sign that was just honoured.
    Detections carry no identity, so "the same sign" is the one still visible
    after the stop; the cooldown is released early once no near stop sign has
    been seen for ``cooldown_clear`` seconds, i.e. the vehicle has passed it.
    """

    mode: str = "cruise"
    stop_timer: float = 0.0
    cooldown: float = 0.0
    unseen: float = 0.0
    omega: float = 0.0
    pid: PidState = field(default_factory=PidState)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.stop_timer < 0 or self.cooldown < 0:
            raise ValueError("timers must be non-negative")


def _clip(v: float, lim: float) -> float:
    return min(max(v, -lim), lim)


def decide(
    detections: list[Detection],
    deviation: float | str,
    rule_state: RuleState,
    dt: float,
    settings: ControlSettings = ControlSettings(),
    seq: int = 0,
) -> tuple[ControlCommand, RuleState]:
    """Map one frame's detections and lane estimate to a command.

    Priority: an active or newly triggered stop, then a near red light, then
    lane following at cruise speed.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    st = rule_state
    near_stop = any(
        d.class_id == ObjectKind.STOP_SIGN
        and d.confidence >= settings.stop_confidence
        and d.box[3] >= settings.near_height
        for d in detections
    )
    near_red = any(
        d.class_id == ObjectKind.TRAFFIC_LIGHT and d.light_state == "red" and d.box[3] >= settings.light_near_height
        for d in detections
    )
    unseen = 0.0 if near_stop else st.unseen + dt
    cooldown = max(st.cooldown - dt, 0.0)
    if cooldown > 0 and unseen >= settings.cooldown_clear and st.mode != "stopping":
        cooldown = 0.0
    st = replace(st, cooldown=cooldown, unseen=unseen)

    if st.mode == "stopping":
        timer = max(st.stop_timer - dt, 0.0)
        if timer > 0:
            return ControlCommand(0.0, 0.0, seq), replace(st, stop_timer=timer)
        st = replace(st, mode="cruise", stop_timer=0.0, cooldown=settings.cooldown, unseen=0.0)
    elif near_stop and st.cooldown == 0:
        st = replace(st, mode="stopping", stop_timer=settings.stop_duration)
        return ControlCommand(0.0, 0.0, seq), st

    if near_red:
        return ControlCommand(0.0, 0.0, seq), replace(st, mode="waiting_light")
    st = replace(st, mode="cruise")

    if deviation == NO_LANE:
        omega = _clip(st.omega, settings.omega_max)
        return ControlCommand(_clip(settings.v_cruise / 2, settings.v_max), omega, seq), st
    u, pid = pid_step(settings.gains, st.pid, float(deviation), dt)
    omega = _clip(-u, settings.omega_max)
    v = _clip(settings.v_cruise, settings.v_max)
    return ControlCommand(v, omega, seq), replace(st, pid=pid, omega=omega)
