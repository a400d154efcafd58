import pytest

from advloop.config import DEFAULTS, ConfigError, ExperimentConfig


def test_defaults_validate_and_build():
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.train_config().epochs == 150
    assert cfg.attack_config("pgd", 0.02).step_size == 0.01
    assert cfg.attack_config("pgd", 0.02).iterations == 10
    assert cfg.loop_config().frame_period == 0.05
    assert cfg.control_settings().gains.kp == DEFAULTS["control.kp"]


def test_dump_roundtrip():
    cfg = ExperimentConfig.from_text("model.epochs = 3\neval.epsilons = 0.02, 0.04\nattack.random_start = true\n")
    again = ExperimentConfig.from_text(cfg.dump())
    assert again.values == cfg.values
    assert again["eval.epsilons"] == (0.02, 0.04) and again["attack.random_start"] is True


def test_comments_and_blank_lines():
    cfg = ExperimentConfig.from_text("# header\n\nmodel.epochs = 4  # trailing\n")
    assert cfg["model.epochs"] == 4


@pytest.mark.parametrize(
    "text",
    [
        "model.epoch = 3",  # unknown key
        "model.epochs = three",
        "model.epochs",
        "net.uplink.delay_ms = nan",
        "attack.kind = cw",
        "net.uplink.jitter_ms = 10",  # jitter above delay
        "scene.track = figure-eight",
        "model.lr_schedule = step",
    ],
)
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_seed_override_reaches_every_component():
    cfg = ExperimentConfig()
    cfg.override_seed(42)
    assert cfg.train_config().seed == 42
    assert cfg.loop_config().seed == 42
    assert cfg.loop_config().uplink.seed == 42 and cfg.loop_config().downlink.seed == 43


def test_scenarios_follow_eval_grid():
    names = [n for n, _, _ in ExperimentConfig().scenarios()]
    assert names == ["baseline", "delay_100ms", "delay_150ms", "delay_250ms", "loss_0.5pct", "loss_2pct", "loss_5pct"]
