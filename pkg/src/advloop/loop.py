"""Closed-loop orchestrator: vehicle -> uplink -> cloud perception/control -> downlink -> vehicle."""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from advloop.attack import AttackConfig, apply_attack
from advloop.control import ControlCommand, ControlSettings, RuleState, annotate_lights, decide, estimate_lane_deviation
from advloop.metrics import match_detections
from advloop.netchan.channel import Channel, NetworkCondition
from advloop.netchan.wire import MSG_FRAME, WireMessage, command_message, frame_message, parse_command, parse_frame
from advloop.perception import LossWeights, ModelParams, decode, forward, loss
from advloop.render import RenderParams, render_frame
from advloop.scene import Scene, TrackSpec, VehicleState, static_objects, step_kinematics

log = logging.getLogger(__name__)

TRANSPORTS = ("simulated", "tcp")
LINK_TIMEOUT = 1.5

TICK_COLUMNS = ("time", "x", "y", "heading", "v_applied", "omega_applied", "cmd_seq", "cmd_age_ms")
FRAME_COLUMNS = ("seq", "t_send", "t_arrive", "dropped", "attacked", "n_detections", "loss_total")


@dataclass(frozen=True)
class LoopConfig:
    tick_dt: float = 0.01
    frame_period: float = 0.05
    episode_duration: float = 120.0
    uplink: NetworkCondition = NetworkCondition()
    downlink: NetworkCondition = NetworkCondition()
    attack: AttackConfig = AttackConfig()
    transport: str = "simulated"
    seed: int = 0
    render: RenderParams = RenderParams()
    control: ControlSettings = ControlSettings()

    def __post_init__(self):
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        if not self.tick_dt > 0 or not self.episode_duration > 0:
            raise ValueError("tick_dt and episode_duration must be positive")
        ratio = self.frame_period / self.tick_dt
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("frame_period must be an integer multiple of tick_dt")

    @property
    def tick_us(self) -> int:
        return int(round(self.tick_dt * 1e6))

    @property
    def frame_ticks(self) -> int:
        return int(round(self.frame_period / self.tick_dt))

    @property
    def n_ticks(self) -> int:
        return int(math.floor(self.episode_duration / self.tick_dt + 1e-9))


@dataclass
class FrameRecord:
    seq: int
    t_send: float
    t_arrive: float | None = None
    dropped: bool = False
    attacked: bool = False
    n_detections: int = 0
    loss_total: float = math.nan


@dataclass
class EpisodeLog:
    """Per-tick vehicle trace, per-frame delivery record and discrete events."""

    times: list[float] = field(default_factory=list)
    xs: list[float] = field(default_factory=list)
    ys: list[float] = field(default_factory=list)
    headings: list[float] = field(default_factory=list)
    v: list[float] = field(default_factory=list)
    omega: list[float] = field(default_factory=list)
    cmd_seq: list[int] = field(default_factory=list)
    cmd_age_ms: list[float] = field(default_factory=list)
    frames: list[FrameRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    aborted: str | None = None
    detection_counts: list[int] = field(default_factory=lambda: [0, 0, 0])  # tp, fp, fn over processed frames

    def record_tick(self, t: float, state: VehicleState, cmd: ControlCommand, seq: int, age_ms: float) -> None:
        self.times.append(t)
        self.xs.append(state.x)
        self.ys.append(state.y)
        self.headings.append(state.heading)
        self.v.append(cmd.v)
        self.omega.append(cmd.omega)
        self.cmd_seq.append(seq)
        self.cmd_age_ms.append(age_ms)

    def event(self, t: float, kind: str, **fields) -> None:
        self.events.append({"time": round(t, 6), "event": kind, **fields})

    @property
    def frames_sent(self) -> int:
        return len(self.frames)

    @property
    def frames_dropped(self) -> int:
        return sum(f.dropped for f in self.frames)

    def write(self, directory: Path) -> None:
        """ticks.csv, frames.csv and events.jsonl (one JSON object per line, keys time/event/...)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with (d / "ticks.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TICK_COLUMNS)
            for row in zip(self.times, self.xs, self.ys, self.headings, self.v, self.omega, self.cmd_seq, self.cmd_age_ms):
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        with (d / "frames.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FRAME_COLUMNS)
            for f in self.frames:
                w.writerow([
                    f.seq, repr(f.t_send), "" if f.t_arrive is None else repr(f.t_arrive),
                    int(f.dropped), int(f.attacked), f.n_detections, repr(f.loss_total),
                ])
        with (d / "events.jsonl").open("w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @classmethod
    def read(cls, directory: Path) -> EpisodeLog:
        d = Path(directory)
        out = cls()
        with (d / "ticks.csv").open() as fh:
            for r in csv.DictReader(fh):
                out.times.append(float(r["time"]))
                out.xs.append(float(r["x"]))
                out.ys.append(float(r["y"]))
                out.headings.append(float(r["heading"]))
                out.v.append(float(r["v_applied"]))
                out.omega.append(float(r["omega_applied"]))
                out.cmd_seq.append(int(r["cmd_seq"]))
                out.cmd_age_ms.append(float(r["cmd_age_ms"]))
        frames_path = d / "frames.csv"
        if frames_path.exists():
            with frames_path.open() as fh:
                for r in csv.DictReader(fh):
                    out.frames.append(FrameRecord(
                        int(r["seq"]), float(r["t_send"]), float(r["t_arrive"]) if r["t_arrive"] else None,
                        r["dropped"] == "1", r["attacked"] == "1", int(r["n_detections"]), float(r["loss_total"]),
                    ))
        events_path = d / "events.jsonl"
        if events_path.exists():
            out.events = [json.loads(line) for line in events_path.read_text().splitlines() if line.strip()]
        return out


def stale_command_filter(received: list[ControlCommand], highest_seq: int) -> tuple[ControlCommand | None, int]:
    """Keep only commands newer than ``highest_seq``; the newest of those wins.

    Returns (command to apply or None, new highest seq). Pass ``-1`` before any
    command has been applied.
    """
    best = None
    for cmd in received:
        if cmd.seq > highest_seq:
            best, highest_seq = cmd, cmd.seq
    return best, highest_seq


class CloudNode:
    """Perception + control for arriving frames; owns the rule and PID state."""

    def __init__(self, theta: ModelParams, config: LoopConfig, weights: LossWeights = LossWeights()):
        self.theta = theta
        self.config = config
        self.weights = weights
        self.state = RuleState()
        self.last_seq = -1
        self.last_ts: int | None = None

    def handle(self, msg: WireMessage, now_us: int, record: FrameRecord | None, events: EpisodeLog | None):
        """Process a frame; returns the command message, or None for a stale frame."""
        if msg.msg_type != MSG_FRAME or msg.seq <= self.last_seq:
            return None  # a newer frame has already driven a decision
        image, labels = parse_frame(msg)
        dt = self.config.frame_period if self.last_ts is None else (msg.timestamp_us - self.last_ts) / 1e6
        self.last_seq, self.last_ts = msg.seq, msg.timestamp_us
        attacked = self.config.attack.kind != "none" and self.config.attack.epsilon > 0 and labels is not None
        if attacked:
            atk = self.config.attack
            atk = AttackConfig(atk.kind, atk.epsilon, atk.step_size, atk.iterations, atk.random_start, atk.seed + msg.seq)
            image = apply_attack(self.theta, image[None], [labels], atk, self.weights)[0]
        raw = forward(self.theta, image)
        dets = annotate_lights(image, decode(raw))
        deviation = estimate_lane_deviation(image)
        before = self.state.mode
        cmd, self.state = decide(dets, deviation, self.state, dt, self.config.control, msg.seq)
        if record is not None:
            record.attacked = attacked
            record.n_detections = len(dets)
            if labels is not None:
                record.loss_total = loss(raw, labels, self.weights).total
        if events is not None and labels is not None:
            m = match_detections(dets, labels)
            c = events.detection_counts
            c[0], c[1], c[2] = c[0] + m.true_positives, c[1] + m.false_positives, c[2] + m.false_negatives
        if events is not None and before != self.state.mode:
            t = now_us / 1e6
            if before != "cruise":
                events.event(t, f"{before}_exit", seq=msg.seq)
            if self.state.mode != "cruise":
                events.event(t, f"{self.state.mode}_enter", seq=msg.seq)
        return command_message(msg.seq, now_us, cmd.v, cmd.omega)


def _start_state(track: TrackSpec) -> VehicleState:
    p = track.point_at(0.0)
    return VehicleState(p.x, p.y, p.theta, 0.0)


def _scene_at(track: TrackSpec, t: float, state: VehicleState) -> Scene:
    return Scene(track, tuple(static_objects(track, track.traffic_light.state_at(t))), state)


def run_episode(config: LoopConfig, track: TrackSpec, theta: ModelParams, start: VehicleState | None = None) -> EpisodeLog:
    """Drive one episode. Simulated mode is single-threaded and bit-reproducible."""
    if config.transport == "tcp":
        return _run_tcp(config, track, theta, start)
    log_ = EpisodeLog()
    up, down = Channel(config.uplink), Channel(config.downlink)
    cloud = CloudNode(theta, config)
    state = start or _start_state(track)
    cmd, highest, capture_us = ControlCommand(0.0, 0.0, 0), -1, {}
    last_cmd_us, link_up = 0, True
    records: dict[int, FrameRecord] = {}
    for k in range(config.n_ticks):
        now = k * config.tick_us
        t = now / 1e6
        if k % config.frame_ticks == 0:
            seq = k // config.frame_ticks
            img, labels = render_frame(
                _scene_at(track, t, state), state, config.render, np.random.SeedSequence([config.seed, seq, 2])
            )
            records[seq] = FrameRecord(seq, t)
            log_.frames.append(records[seq])
            capture_us[seq] = now
            up.send(frame_message(seq, now, img, labels), now)
            if up.drop_log and up.drop_log[-1][1] == seq and up.drop_log[-1][0] == now:
                records[seq].dropped = True
        for at, msg in up.poll_timed(now):
            rec = records[msg.seq]
            rec.t_arrive = at / 1e6
            reply = cloud.handle(msg, now, rec, log_)
            if reply is not None:
                down.send(reply, now)
        new, highest = stale_command_filter(
            [ControlCommand(*parse_command(m), m.seq) for m in down.poll(now)], highest
        )
        if new is not None:
            cmd, last_cmd_us = new, now
            if not link_up:
                link_up = True
                log_.event(t, "link_up")
        elif link_up and now - last_cmd_us >= LINK_TIMEOUT * 1e6:
            link_up = False
            log_.event(t, "link_down", reason="no command for %.1f s" % LINK_TIMEOUT)
        age = (now - capture_us[highest]) / 1e3 if highest >= 0 else math.nan
        log_.record_tick(t, state, cmd, highest, age)
        try:
            state = step_kinematics(state, cmd, config.tick_dt)
        except ValueError as exc:
            log_.aborted = str(exc)
            log_.event(t, "abort", reason=str(exc))
            log.error("episode aborted at t=%.2f: %s", t, exc)
            break
    return log_


# ---------------------------------------------------------------- TCP mode


def serve_cloud(transport, theta: ModelParams, config: LoopConfig, stop: threading.Event | None = None) -> int:
    """Cloud process loop over a connected transport; returns frames handled.

    The configured downlink impairment is applied before transmission.
    """
    from advloop.netchan.tcp import LinkDown

    cloud = CloudNode(theta, config)
    down = Channel(config.downlink)
    t0 = time.monotonic()
    handled = 0
    while stop is None or not stop.is_set():
        now = int((time.monotonic() - t0) * 1e6)
        try:
            msg = transport.recv(timeout=0.002)
        except LinkDown:
            break
        now = int((time.monotonic() - t0) * 1e6)
        if msg is not None:
            reply = cloud.handle(msg, now, None, None)
            if reply is not None:
                handled += 1
                down.send(reply, now)
        for m in down.poll(now):
            try:
                transport.send(m)
            except LinkDown:
                return handled
    return handled


def drive_vehicle(transport, config: LoopConfig, track: TrackSpec, start: VehicleState | None = None) -> EpisodeLog:
    """Vehicle process loop paced by the wall clock; uplink impairment applied before sending."""
    from advloop.netchan.tcp import LinkDown

    log_ = EpisodeLog()
    up = Channel(config.uplink)
    state = start or _start_state(track)
    cmd, highest, capture_us = ControlCommand(0.0, 0.0, 0), -1, {}
    last_cmd_us, link_up = 0, True
    t0 = time.monotonic()
    for k in range(config.n_ticks):
        now = k * config.tick_us
        t = now / 1e6
        lag = t0 + t - time.monotonic()
        if lag > 0:
            time.sleep(lag)
        if k % config.frame_ticks == 0:
            seq = k // config.frame_ticks
            img, labels = render_frame(
                _scene_at(track, t, state), state, config.render, np.random.SeedSequence([config.seed, seq, 2])
            )
            log_.frames.append(FrameRecord(seq, t))
            capture_us[seq] = now
            up.send(frame_message(seq, now, img, labels), now)
            if up.drop_log and up.drop_log[-1] == (now, seq):
                log_.frames[-1].dropped = True
        for m in up.poll(now):
            try:
                transport.send(m)
            except LinkDown:
                pass
        received = []
        while True:
            try:
                m = transport.inbox.get_nowait()
            except Exception:
                break
            received.append(ControlCommand(*parse_command(m), m.seq))
        new, highest = stale_command_filter(received, highest)
        if new is not None:
            cmd, last_cmd_us = new, now
            if not link_up:
                link_up = True
                log_.event(t, "link_up")
        elif link_up and (now - last_cmd_us >= LINK_TIMEOUT * 1e6 or transport.down.is_set()):
            link_up = False
            log_.event(t, "link_down", reason=transport.down_reason or "no command for %.1f s" % LINK_TIMEOUT)
        age = (now - capture_us[highest]) / 1e3 if highest >= 0 else math.nan
        log_.record_tick(t, state, cmd, highest, age)
        state = step_kinematics(state, cmd, config.tick_dt)
    return log_


def _run_tcp(config: LoopConfig, track: TrackSpec, theta: ModelParams, start: VehicleState | None) -> EpisodeLog:
    """Both ends in one process over a loopback socket (the CLI runs them separately)."""
    from advloop.netchan.tcp import tcp_connect, tcp_serve

    with tcp_serve("127.0.0.1:0") as server:
        holder = {}

        def cloud_side():
            with server.accept(timeout=5.0) as conn:
                holder["handled"] = serve_cloud(conn, theta, config)

        th = threading.Thread(target=cloud_side, daemon=True)
        th.start()
        with tcp_connect(server.address) as conn:
            out = drive_vehicle(conn, config, track, start)
        th.join(timeout=5.0)
    return out
