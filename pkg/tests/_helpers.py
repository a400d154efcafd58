"""Shared oracles for the test suite."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from advloop.perception import ModelParams, _forward_batch, image_loss, input_gradient, param_gradient
from advloop.render import LabelSet, RenderParams, render_frame
from advloop.scene import rect_track, sample_scene

FD_STEP = 1e-3


def relu_pattern(theta: ModelParams, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, cache = _forward_batch(theta, image[None])
    return cache[1] > 0, cache[3] > 0


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_frame(seed: int, noise: float = 0.02) -> tuple[np.ndarray, LabelSet]:
    track = rect_track()
    scene = sample_scene(seed, track)
    return render_frame(scene, scene.viewpoint, RenderParams(noise_sigma=noise), seed)


def input_fd_errors(theta, image, labels, n_pixels, rng, h=FD_STEP):
    """Relative errors of the analytic input gradient at random pixels.

    Pixels whose +-h probe flips any ReLU are skipped: the loss is not
    differentiable across the kink, so the finite difference is meaningless.
    """
    grad = input_gradient(theta, image, labels)
    errs = []
    for _ in range(n_pixels * 5):
        if len(errs) == n_pixels:
            break
        idx = tuple(rng.integers(0, s) for s in image.shape)
        up, down = image.copy(), image.copy()
        up[idx] += h
        down[idx] -= h
        pu, pd = relu_pattern(theta, up), relu_pattern(theta, down)
        if not all(np.array_equal(a, b) for a, b in zip(pu, pd)):
            continue
        fd = (image_loss(theta, up, labels) - image_loss(theta, down, labels)) / (2 * h)
        errs.append(rel_err(grad[idx], fd))
    return errs


def param_fd_errors(theta, image, labels, n_params, rng, h=FD_STEP):
    grads, _ = param_gradient(theta, image[None], [labels])
    g = grads.flatten()
    flat = theta.flatten()
    errs = []
    for _ in range(n_params * 5):
        if len(errs) == n_params:
            break
        i = int(rng.integers(0, flat.size))
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        tu, td = theta.with_flat(up), theta.with_flat(down)
        pu, pd = relu_pattern(tu, image), relu_pattern(td, image)
        if not all(np.array_equal(a, b) for a, b in zip(pu, pd)):
            continue
        fd = (image_loss(tu, image, labels) - image_loss(td, image, labels)) / (2 * h)
        errs.append(rel_err(g[i], fd))
    return errs


# criterion number -> "criterion N ...: PASS/FAIL" line, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for an acceptance criterion; assertion failures propagate."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        line = f"criterion {number:2d} FAIL  {title}: {exc}".splitlines()[0]
        ACCEPTANCE[number] = line
        print(line)
        raise
    line = f"criterion {number:2d} PASS  {title}" + (f" ({'; '.join(notes)})" if notes else "")
    ACCEPTANCE[number] = line
    print(line)
