import numpy as np
import pytest

from advloop.control import (
    NO_LANE,
    ControlCommand,
    ControlSettings,
    PidGains,
    PidState,
    RuleState,
    annotate_lights,
    decide,
    estimate_lane_deviation,
    light_color,
    pid_step,
)
from advloop.perception import Detection
from advloop.render import DEFAULT_PALETTE, RenderParams, render_frame
from advloop.scene import ObjectKind, Pose, Scene, SceneObject, VehicleState, rect_track

LANE = DEFAULT_PALETTE["lane"]
DT = 0.05
NEAR_STOP = Detection((0.5, 0.5, 0.1, 0.3), int(ObjectKind.STOP_SIGN), 0.9)


# ------------------------------------------------------------------ PID


def test_pid_pure_proportional():
    u, _ = pid_step(PidGains(1, 0, 0), PidState(), 0.2, 0.1)
    assert u == pytest.approx(0.2)


def test_pid_pure_integral():
    st, out = PidState(), []
    for _ in range(3):
        u, st = pid_step(PidGains(0, 1, 0), st, 0.5, 0.1)
        out.append(u)
    assert out == pytest.approx([0.05, 0.10, 0.15])


def test_pid_pure_derivative():
    g = PidGains(0, 0, 1)
    u0, st = pid_step(g, PidState(), 0.0, 0.1)
    u1, _ = pid_step(g, st, 0.2, 0.1)
    assert u0 == 0.0 and u1 == pytest.approx(2.0)


def test_pid_no_derivative_kick_on_first_call():
    u, _ = pid_step(PidGains(0, 0, 1), PidState(), 5.0, 0.1)
    assert u == 0.0


def test_pid_integral_clamped():
    st = PidState()
    for _ in range(100):
        u, st = pid_step(PidGains(0, 1, 0, integral_limit=0.3), st, 1.0, 0.1)
    assert st.integral == 0.3 and u == pytest.approx(0.3)


def test_pid_rejects_bad_dt_and_gains():
    with pytest.raises(ValueError):
        pid_step(PidGains(), PidState(), 0.1, 0.0)
    with pytest.raises(ValueError):
        PidGains(kp=float("nan"))


def test_command_validation():
    with pytest.raises(ValueError):
        ControlCommand(float("inf"), 0.0)
    with pytest.raises(ValueError):
        ControlCommand(0.0, 0.0, seq=-1)


# ------------------------------------------------------------------ lane estimate


def blank(h=64, w=64):
    return np.full((h, w, 3), 0.3)


def test_symmetric_lane_bands_center():
    img = blank()
    img[40:, 10:14] = LANE
    img[40:, 50:54] = LANE
    assert estimate_lane_deviation(img) == pytest.approx(0.0, abs=0.02)


def test_markings_at_three_quarter_width():
    img = blank()
    img[:, 48] = LANE
    assert estimate_lane_deviation(img) == pytest.approx(0.5)


def test_upper_half_ignored_and_blank_is_no_lane():
    assert estimate_lane_deviation(blank()) == NO_LANE
    img = blank()
    img[:32] = LANE
    assert estimate_lane_deviation(img) == NO_LANE


def test_few_pixels_is_no_lane():
    img = blank()
    img[60, :9] = LANE
    assert estimate_lane_deviation(img) == NO_LANE


def test_lane_estimate_on_rendered_centerline():
    track = rect_track()
    p = track.point_at(0.6)
    view = VehicleState(p.x, p.y, p.theta)
    img, _ = render_frame(Scene(track, (), view), view, RenderParams(noise_sigma=0.0), 0)
    assert abs(estimate_lane_deviation(img)) < 0.05


# ------------------------------------------------------------------ lights


def rendered_light(state):
    track = rect_track()
    p = track.point_at(0.5)
    view = VehicleState(p.x, p.y, p.theta)
    light = SceneObject(ObjectKind.TRAFFIC_LIGHT, Pose(view.x + 0.35, view.y + 0.12, 0.0), (0.06, 0.14), state, 0.08)
    img, labels = render_frame(Scene(track, (light,), view), view, RenderParams(), 0)
    return img, labels.boxes[0]


@pytest.mark.parametrize("state", ["red", "green"])
def test_light_color_read_from_pixels(state):
    img, box = rendered_light(state)
    assert light_color(img, box) == state


def test_light_color_none_on_empty_patch():
    assert light_color(blank(), (0.5, 0.5, 0.2, 0.2)) == "none"


def test_annotate_only_touches_lights():
    img, box = rendered_light("red")
    dets = [Detection(tuple(box), int(ObjectKind.TRAFFIC_LIGHT), 0.9), NEAR_STOP]
    out = annotate_lights(img, dets)
    assert out[0].light_state == "red" and out[1] == NEAR_STOP


# ------------------------------------------------------------------ decide


def test_cruise_straight():
    cmd, st = decide([], 0.0, RuleState(), DT)
    assert (cmd.v, cmd.omega) == (0.3, 0.0) and st.mode == "cruise"


def test_steers_toward_markings():
    cmd, _ = decide([], 0.2, RuleState(), DT)
    assert cmd.omega == pytest.approx(-3.0 * 0.2)


def test_omega_clipped():
    cmd, _ = decide([], 1.0, RuleState(), DT, ControlSettings(gains=PidGains(kp=100)))
    assert cmd.omega == -4.0


def run(script, state=RuleState(), settings=ControlSettings()):
    """Feed (detections, n_ticks) segments; return per-tick speeds and final state."""
    speeds = []
    for dets, n in script:
        for _ in range(n):
            cmd, state = decide(dets, 0.0, state, DT, settings)
            speeds.append(cmd.v)
    return speeds, state


def test_stop_sign_holds_two_seconds_then_blocks_same_sign():
    # sign stays in view for 12 s: stop 2 s, then cruise; no retrigger until the 10 s cooldown ends
    speeds, _ = run([([NEAR_STOP], 240)])
    stopped = [i for i, v in enumerate(speeds) if v == 0.0]
    assert stopped[:40] == list(range(40))
    assert speeds[40] == 0.3
    assert all(v == 0.3 for v in speeds[40:240])
    speeds, _ = run([([NEAR_STOP], 241 + 1)])
    assert speeds[241] == 0.0


def test_cooldown_clears_once_sign_passed():
    speeds, st = run([([NEAR_STOP], 41), ([], 21)])
    assert st.cooldown == 0.0
    speeds, st = run([([NEAR_STOP], 1)], st)
    assert speeds == [0.0] and st.mode == "stopping"


def test_far_or_weak_stop_sign_ignored():
    far = Detection((0.5, 0.5, 0.1, 0.2), int(ObjectKind.STOP_SIGN), 0.9)
    weak = Detection((0.5, 0.5, 0.1, 0.3), int(ObjectKind.STOP_SIGN), 0.4)
    cmd, st = decide([far, weak], 0.0, RuleState(), DT)
    assert cmd.v == 0.3 and st.mode == "cruise"


def test_red_light_holds_until_green():
    red_img, box = rendered_light("red")
    green_img, _ = rendered_light("green")
    det = Detection(tuple(box), int(ObjectKind.TRAFFIC_LIGHT), 0.9)
    state, speeds = RuleState(), []
    for t in range(60):
        img = red_img if t < 40 else green_img
        cmd, state = decide(annotate_lights(img, [det]), 0.0, state, DT)
        speeds.append(cmd.v)
    assert all(v == 0.0 for v in speeds[:40]) and all(v == 0.3 for v in speeds[40:])
    assert state.mode == "cruise"


def test_no_lane_holds_previous_omega_at_half_speed():
    _, st = decide([], 0.1, RuleState(), DT)
    cmd, st2 = decide([], NO_LANE, st, DT)
    assert cmd.v == 0.15 and cmd.omega == pytest.approx(st.omega)


def test_decide_rejects_bad_dt():
    with pytest.raises(ValueError):
        decide([], 0.0, RuleState(), 0.0)
