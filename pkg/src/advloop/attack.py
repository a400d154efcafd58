"""White-box FGSM and PGD against the detector loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from advloop.perception import LossWeights, ModelParams, input_gradients
from advloop.render import LabelSet

KINDS = ("none", "fgsm", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    epsilon: float = 0.0
    step_size: float = 0.01
    iterations: int = 10
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.kind == "pgd" and self.step_size <= 0:
            raise ValueError("PGD step size must be positive")


def project(candidate: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the L-inf ball around ``origin``, then into [0, 1]."""
    if candidate.shape != origin.shape:
        raise ValueError("candidate and origin shapes differ")
    return np.clip(np.clip(candidate, origin - epsilon, origin + epsilon), 0.0, 1.0)


def fgsm_step(x: np.ndarray, grad: np.ndarray, epsilon: float) -> np.ndarray:
    """Signed-gradient step of size ``epsilon`` clamped to [0, 1]; sign(0) = 0."""
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def pgd_ascent(grad_fn, x: np.ndarray, epsilon: float, alpha: float, t_iterations: int,
               rng_seed=None, random_start: bool = False) -> np.ndarray:
    """Projected signed-gradient ascent for any differentiable objective.

    Args:
        grad_fn: Maps the current iterate to the objective's gradient (same shape).
        x: Origin of the L-inf ball.
        epsilon: Ball radius.
        alpha: Step size per iteration.
        t_iterations: Number of ascent steps.
        rng_seed: Seed for the optional uniform random start.
        random_start: Start from a uniform point in the ball instead of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    adv = x.copy()
    if random_start:
        rng = np.random.default_rng(rng_seed)
        adv = project(x + rng.uniform(-epsilon, epsilon, x.shape), x, epsilon)
    for _ in range(t_iterations):
        adv = project(adv + alpha * np.sign(grad_fn(adv)), x, epsilon)
    return adv


def fgsm_batch(theta, images, labels, epsilon, weights=LossWeights()):
    grad, _ = input_gradients(theta, images, labels, weights)
    return fgsm_step(images, grad, epsilon)


def pgd_batch(theta, images, labels, epsilon, alpha, t_iterations, rng_seed=None, random_start=False, weights=LossWeights()):
    def grad_fn(adv):
        return input_gradients(theta, adv, labels, weights)[0]

    return pgd_ascent(grad_fn, images, epsilon, alpha, t_iterations, rng_seed, random_start)


def fgsm(theta: ModelParams, x: np.ndarray, y: LabelSet, epsilon: float, weights: LossWeights = LossWeights()) -> np.ndarray:
    """One signed-gradient step of size ``epsilon``; sign(0) = 0."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return fgsm_batch(theta, np.asarray(x, dtype=np.float64)[None], [y], epsilon, weights)[0]


def pgd(
    theta: ModelParams,
    x: np.ndarray,
    y: LabelSet,
    epsilon: float,
    alpha: float,
    t_iterations: int,
    rng_seed=None,
    random_start: bool = False,
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """Iterated signed-gradient ascent, projected after every step."""
    if alpha <= 0 or t_iterations < 0:
        raise ValueError("PGD needs alpha > 0 and t_iterations >= 0")
    x = np.asarray(x, dtype=np.float64)
    return pgd_batch(theta, x[None], [y], epsilon, alpha, t_iterations, rng_seed, random_start, weights)[0]


def apply_attack(theta, images, labels, config: AttackConfig, weights=LossWeights(), batch: int = 64) -> np.ndarray:
    """Attack a stack of frames with their ground-truth labels."""
    images = np.asarray(images, dtype=np.float64)
    if config.kind == "none" or config.epsilon == 0:
        return images.copy()
    out = np.empty_like(images)
    for start in range(0, len(images), batch):
        sl = slice(start, start + batch)
        if config.kind == "fgsm":
            out[sl] = fgsm_batch(theta, images[sl], labels[sl], config.epsilon, weights)
        else:
            seed = None if not config.random_start else np.random.SeedSequence([config.seed, start])
            out[sl] = pgd_batch(
                theta, images[sl], labels[sl], config.epsilon, config.step_size,
                config.iterations, seed, config.random_start, weights,
            )
    return out
