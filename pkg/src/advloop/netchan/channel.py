"""Seeded delay/jitter/loss channel driven by an external microsecond clock."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from advloop.netchan.wire import WireMessage

STAGE_NAMES = ("reconnaissance", "discovery", "impact")


@dataclass(frozen=True)
class NetworkCondition:
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.delay_ms < 0:
            raise ValueError("delay_ms must be >= 0")
        if not 0 <= self.jitter_ms <= self.delay_ms:
            raise ValueError("jitter_ms must lie in [0, delay_ms]")
        if not 0 <= self.loss_prob <= 1:
            raise ValueError("loss_prob must lie in [0, 1]")

    @property
    def min_delay_us(self) -> int:
        return math.ceil((self.delay_ms - self.jitter_ms) * 1000.0)


@dataclass(frozen=True)
class Stage:
    name: str
    time_s: float
    note: str = ""

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise ValueError(f"unknown stage {self.name!r}")


@dataclass(frozen=True)
class AdversaryScenario:
    """Staged network attack; only the impact stage changes channel behaviour."""

    stages: tuple[Stage, ...] = ()
    impact_condition: NetworkCondition | None = None

    def __post_init__(self):
        times = [s.time_s for s in self.stages]
        if times != sorted(times):
            raise ValueError("stages must be ordered by time")
        if sum(s.name == "impact" for s in self.stages) > 1:
            raise ValueError("impact may appear at most once")

    @property
    def impact_time(self) -> float | None:
        for s in self.stages:
            if s.name == "impact":
                return s.time_s
        return None

    @classmethod
    def standard(cls, condition: NetworkCondition, impact_time: float = 0.0) -> AdversaryScenario:
        return cls(
            (
                Stage("reconnaissance", 0.0, "host and port discovery on the vehicle subnet"),
                Stage("discovery", 0.0, "traffic inspection of the frame/command stream"),
                Stage("impact", impact_time, f"delay={condition.delay_ms}ms jitter={condition.jitter_ms}ms loss={condition.loss_prob}"),
            ),
            condition,
        )


@dataclass(order=True)
class _InFlight:
    deliver_at_us: int
    seq: int
    order: int
    msg: WireMessage = field(compare=False)


class Channel:
    """One direction of the link.

    Every send consumes exactly two uniforms from the channel's stream: the
    first decides loss, the second the jitter offset, so the delivery schedule
    is a pure function of (seed, send sequence).
    """

    def __init__(self, condition: NetworkCondition):
        self.condition = condition
        self._rng = np.random.default_rng(condition.seed)
        self._queue: list[_InFlight] = []
        self._order = 0
        self._last_send_us: int | None = None
        self._last_poll_us: int | None = None
        self.sent = 0
        self.dropped = 0
        self.drop_log: list[tuple[int, int]] = []  # (now_us, seq)
        self.schedule: list[tuple[int, int, int | None]] = []  # (send_us, seq, deliver_us or None)

    def set_condition(self, condition: NetworkCondition) -> None:
        """Switch impairment parameters without resetting the random stream."""
        self.condition = condition

    def send(self, msg: WireMessage, now_us: int) -> None:
        if self._last_send_us is not None and now_us < self._last_send_us:
            raise ValueError("clock went backwards")
        self._last_send_us = now_us
        u_loss, u_jit = self._rng.random(2)
        self.sent += 1
        c = self.condition
        if u_loss < c.loss_prob:
            self.dropped += 1
            self.drop_log.append((now_us, msg.seq))
            self.schedule.append((now_us, msg.seq, None))
            return
        delay_ms = c.delay_ms + (2.0 * u_jit - 1.0) * c.jitter_ms
        deliver = now_us + math.ceil(delay_ms * 1000.0)
        heapq.heappush(self._queue, _InFlight(deliver, msg.seq, self._order, msg))
        self._order += 1
        self.schedule.append((now_us, msg.seq, deliver))

    def poll(self, now_us: int) -> list[WireMessage]:
        """Consume every message due by ``now_us``, in delivery order (ties by seq)."""
        return [m for _, m in self.poll_timed(now_us)]

    def poll_timed(self, now_us: int) -> list[tuple[int, WireMessage]]:
        """Like :meth:`poll` but pairs each message with its delivery time."""
        if self._last_poll_us is not None and now_us < self._last_poll_us:
            raise ValueError("clock went backwards")
        self._last_poll_us = now_us
        out = []
        while self._queue and self._queue[0].deliver_at_us <= now_us:
            item = heapq.heappop(self._queue)
            out.append((item.deliver_at_us, item.msg))
        return out

    @property
    def in_flight(self) -> int:
        return len(self._queue)
