"""Experiment configuration: flat ``section.key = value`` text files.

Every key has a default below; a file only lists overrides. Unknown keys and
unparsable values raise :class:`ConfigError`. Lines starting with ``#`` are
comments. List values are comma separated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from advloop.attack import AttackConfig
from advloop.control import ControlSettings, PidGains
from advloop.loop import LoopConfig
from advloop.metrics import ComplianceSettings, EvalSettings
from advloop.netchan.channel import NetworkCondition
from advloop.perception import ModelConfig, TrainConfig
from advloop.render import RenderParams
from advloop.scene import TRACK_PRESETS, TrackSpec

DEFAULTS: dict[str, object] = {
    # scene
    "scene.track": "rect-3x2",
    "scene.red_duration": 6.0,
    "scene.green_duration": 6.0,
    # render + dataset
    "render.noise_sigma": 0.02,
    "render.min_box_pixels": 6,
    "render.max_distance": 2.5,
    "render.n_frames": 2400,
    "render.train_fraction": 0.7,
    "render.seed": 0,
    # detector + training
    "model.grid": 4,
    "model.conv1": 8,
    "model.conv2": 16,
    "model.pool": 2,
    "model.epochs": 150,
    "model.learning_rate": 0.02,
    "model.momentum": 0.9,
    "model.batch_size": 32,
    "model.seed": 0,
    "model.lr_schedule": "cosine",
    "model.final_lr_fraction": 0.05,
    "model.lambda_box": 7.5,
    "model.lambda_cls": 0.5,
    "model.lambda_dfl": 0.0,
    # attack (kind/epsilon apply to closed-loop runs; eval sweeps its own grid)
    "attack.kind": "none",
    "attack.epsilon": 0.0,
    "attack.alpha": 0.01,
    "attack.iterations": 10,
    "attack.random_start": False,
    "attack.seed": 0,
    # network, one-way per direction
    "net.uplink.delay_ms": 0.0,
    "net.uplink.jitter_ms": 0.0,
    "net.uplink.loss_prob": 0.0,
    "net.uplink.seed": 0,
    "net.downlink.delay_ms": 0.0,
    "net.downlink.jitter_ms": 0.0,
    "net.downlink.loss_prob": 0.0,
    "net.downlink.seed": 1,
    # control
    "control.kp": 3.0,
    "control.ki": 0.0,
    "control.kd": 0.3,
    "control.integral_limit": 1.0,
    "control.v_cruise": 0.3,
    "control.v_max": 0.5,
    "control.omega_max": 4.0,
    "control.stop_confidence": 0.5,
    "control.near_height": 0.25,
    "control.light_near_height": 0.2,
    "control.stop_duration": 2.0,
    "control.cooldown": 10.0,
    "control.cooldown_clear": 1.0,
    # loop
    "loop.tick_dt": 0.01,
    "loop.frame_period": 0.05,
    "loop.episode_duration": 120.0,
    "loop.transport": "simulated",
    "loop.seed": 0,
    # evaluation grids and gates
    "eval.conf_threshold": 0.25,
    "eval.nms_iou": 0.5,
    "eval.iou_threshold": 0.5,
    "eval.epsilons": (0.01, 0.02, 0.04),
    "eval.attacks": ("fgsm", "pgd"),
    "eval.delays_ms": (100.0, 150.0, 250.0),
    "eval.losses_pct": (0.5, 2.0, 5.0),
    "eval.jitter_ms": 0.0,
    "eval.speed_threshold": 0.02,
    "eval.min_dwell": 1.0,
    "eval.zone_length": 0.15,
    "eval.rms_gate": 0.05,
}

SEED_KEYS = ("render.seed", "model.seed", "attack.seed", "loop.seed", "net.uplink.seed", "net.downlink.seed")


class ConfigError(ValueError):
    pass


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            v = float(text)
            if not math.isfinite(v):
                raise ValueError(text)
            return v
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from exc


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Path | None) -> ExperimentConfig:
        if path is None:
            return cls()
        return cls.from_text(Path(path).read_text())

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        self.values[key] = _parse_value(key, value, default) if isinstance(value, str) else value

    def override_seed(self, seed: int) -> None:
        """--seed: every component seed follows it (downlink gets seed + 1)."""
        for key in SEED_KEYS:
            self.values[key] = seed
        self.values["net.downlink.seed"] = seed + 1

    def dump(self) -> str:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(str(x) for x in v)
            return str(v).lower() if isinstance(v, bool) else str(v)

        return "".join(f"{k} = {fmt(self.values[k])}\n" for k in DEFAULTS)

    def validate(self) -> None:
        """Build every component once so bad combinations fail before any work."""
        try:
            self.track()
            self.render_params()
            self.model_config()
            self.train_config()
            self.attack_config()
            self.loop_config()
            self.compliance_settings()
            self.eval_settings()
            for kind in self["eval.attacks"]:
                AttackConfig(kind, 0.0)
        except (ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    # ---------------------------------------------------------- builders

    def track(self) -> TrackSpec:
        name = self["scene.track"]
        if name not in TRACK_PRESETS:
            raise ConfigError(f"unknown track preset {name!r}")
        return TRACK_PRESETS[name](red_duration=self["scene.red_duration"], green_duration=self["scene.green_duration"])

    def render_params(self) -> RenderParams:
        return RenderParams(
            noise_sigma=self["render.noise_sigma"],
            min_box_pixels=self["render.min_box_pixels"],
            max_distance=self["render.max_distance"],
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(grid=self["model.grid"], conv1=self["model.conv1"], conv2=self["model.conv2"], pool=self["model.pool"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["model.epochs"],
            learning_rate=self["model.learning_rate"],
            momentum=self["model.momentum"],
            batch_size=self["model.batch_size"],
            seed=self["model.seed"],
            lr_schedule=self["model.lr_schedule"],
            final_lr_fraction=self["model.final_lr_fraction"],
        )

    def loss_weights(self):
        from advloop.perception import LossWeights

        return LossWeights(self["model.lambda_box"], self["model.lambda_cls"], self["model.lambda_dfl"])

    def attack_config(self, kind: str | None = None, epsilon: float | None = None) -> AttackConfig:
        return AttackConfig(
            kind=self["attack.kind"] if kind is None else kind,
            epsilon=self["attack.epsilon"] if epsilon is None else epsilon,
            step_size=self["attack.alpha"],
            iterations=self["attack.iterations"],
            random_start=self["attack.random_start"],
            seed=self["attack.seed"],
        )

    def condition(self, direction: str, delay_ms=None, loss_prob=None, jitter_ms=None) -> NetworkCondition:
        p = f"net.{direction}."
        return NetworkCondition(
            delay_ms=self[p + "delay_ms"] if delay_ms is None else delay_ms,
            jitter_ms=self[p + "jitter_ms"] if jitter_ms is None else jitter_ms,
            loss_prob=self[p + "loss_prob"] if loss_prob is None else loss_prob,
            seed=self[p + "seed"],
        )

    def control_settings(self) -> ControlSettings:
        return ControlSettings(
            v_cruise=self["control.v_cruise"],
            v_max=self["control.v_max"],
            omega_max=self["control.omega_max"],
            stop_confidence=self["control.stop_confidence"],
            near_height=self["control.near_height"],
            light_near_height=self["control.light_near_height"],
            stop_duration=self["control.stop_duration"],
            cooldown=self["control.cooldown"],
            cooldown_clear=self["control.cooldown_clear"],
            gains=PidGains(self["control.kp"], self["control.ki"], self["control.kd"], self["control.integral_limit"]),
        )

    def loop_config(self, uplink: NetworkCondition | None = None, downlink: NetworkCondition | None = None) -> LoopConfig:
        return LoopConfig(
            tick_dt=self["loop.tick_dt"],
            frame_period=self["loop.frame_period"],
            episode_duration=self["loop.episode_duration"],
            uplink=uplink or self.condition("uplink"),
            downlink=downlink or self.condition("downlink"),
            attack=self.attack_config(),
            transport=self["loop.transport"],
            seed=self["loop.seed"],
            render=self.render_params(),
            control=self.control_settings(),
        )

    def eval_settings(self) -> EvalSettings:
        return EvalSettings(self["eval.conf_threshold"], self["eval.nms_iou"], self["eval.iou_threshold"])

    def compliance_settings(self) -> ComplianceSettings:
        return ComplianceSettings(self["eval.speed_threshold"], self["eval.min_dwell"], self["eval.zone_length"])

    def scenarios(self) -> list[tuple[str, float, float]]:
        """(name, one-way delay ms, loss fraction) for the closed-loop grid."""
        out = [("baseline", 0.0, 0.0)]
        out += [(f"delay_{d:g}ms", d, 0.0) for d in self["eval.delays_ms"]]
        out += [(f"loss_{p:g}pct", 0.0, p / 100.0) for p in self["eval.losses_pct"]]
        return out
