import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _helpers import random_frame
from advloop.attack import AttackConfig, apply_attack, fgsm, fgsm_step, pgd, pgd_ascent, project
from advloop.perception import ModelParams, batch_losses

THETA = ModelParams.init(seed=7)


def test_fgsm_zero_gradient_is_identity():
    img, labels = random_frame(0)
    assert np.array_equal(fgsm(ModelParams.zeros(), img, labels, 0.04), img)


def test_fgsm_toy_quadratic():
    x = np.array([0.2])
    grad = 2 * (x - 0.5)
    assert grad[0] == pytest.approx(-0.6)
    out = fgsm_step(x, grad, 0.1)
    assert out[0] == pytest.approx(0.1)
    assert (x[0] - 0.5) ** 2 == pytest.approx(0.09) and (out[0] - 0.5) ** 2 == pytest.approx(0.16)


def test_fgsm_positive_gradient_shifts_by_epsilon_unless_clamped():
    x = np.array([0.0, 0.5, 0.97, 1.0])
    out = fgsm_step(x, np.ones_like(x), 0.04)
    assert out == pytest.approx([0.04, 0.54, 1.0, 1.0])


def test_pgd_toy_linear_pins_at_ball_edge():
    trace = []

    def grad_fn(z):
        trace.append(z.copy())
        return np.ones_like(z)

    out = pgd_ascent(grad_fn, np.array([0.5]), 0.03, 0.01, 10)
    assert [round(float(t[0]), 10) for t in trace[1:4]] == [0.51, 0.52, 0.53]
    assert out[0] == pytest.approx(0.53)


def test_pgd_zero_iterations_returns_input():
    img, labels = random_frame(1)
    assert np.array_equal(pgd(THETA, img, labels, 0.04, 0.01, 0), img)


def test_pgd_single_step_equals_fgsm_bitwise():
    for seed in range(5):
        img, labels = random_frame(seed)
        for eps in (0.01, 0.02, 0.04):
            assert np.array_equal(pgd(THETA, img, labels, eps, eps, 1), fgsm(THETA, img, labels, eps))


def test_attack_feasibility():
    img, labels = random_frame(3)
    for eps in (0.01, 0.02, 0.04):
        for adv in (fgsm(THETA, img, labels, eps), pgd(THETA, img, labels, eps, 0.01, 10)):
            assert np.max(np.abs(adv - img)) <= eps + 1e-12
            assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_random_start_is_seeded_and_feasible():
    img, labels = random_frame(4)
    a = pgd(THETA, img, labels, 0.02, 0.01, 2, rng_seed=5, random_start=True)
    b = pgd(THETA, img, labels, 0.02, 0.01, 2, rng_seed=5, random_start=True)
    assert np.array_equal(a, b) and np.max(np.abs(a - img)) <= 0.02 + 1e-12


def test_pgd_increases_loss():
    frames = [random_frame(s) for s in range(20)]
    x = np.stack([f[0] for f in frames])
    y = [f[1] for f in frames]
    before = batch_losses(THETA, x, y)
    after_pgd = batch_losses(THETA, apply_attack(THETA, x, y, AttackConfig("pgd", 0.02)), y)
    after_fgsm = batch_losses(THETA, apply_attack(THETA, x, y, AttackConfig("fgsm", 0.02)), y)
    assert np.mean(after_pgd >= before) >= 0.95
    assert after_pgd.mean() >= after_fgsm.mean()


def test_apply_attack_none_copies():
    img, labels = random_frame(0)
    out = apply_attack(THETA, img[None], [labels], AttackConfig())
    assert np.array_equal(out[0], img) and out is not img


@pytest.mark.parametrize(
    "kwargs", [dict(kind="cw"), dict(kind="fgsm", epsilon=-0.1), dict(kind="pgd", step_size=0.0), dict(kind="pgd", iterations=-1)]
)
def test_attack_config_validation(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


def test_project_examples():
    origin = np.array([0.2, 0.5, 0.9])
    inside = origin + np.array([0.01, -0.02, 0.0])
    assert np.array_equal(project(inside, origin, 0.03), inside)
    assert project(origin + 0.3, origin, 0.03) == pytest.approx([0.23, 0.53, 0.93])
    with pytest.raises(ValueError):
        project(np.zeros(2), np.zeros(3), 0.1)


unit = arrays(np.float64, 16, elements=st.floats(0, 1))
wide = arrays(np.float64, 16, elements=st.floats(-2, 3))


@given(wide, unit, st.floats(0, 0.5))
def test_project_idempotent_and_feasible(z, origin, eps):
    p = project(z, origin, eps)
    assert np.array_equal(project(p, origin, eps), p)
    assert np.all(np.abs(p - origin) <= eps + 1e-12) and p.min() >= 0 and p.max() <= 1
