"""Grid-cell object detector with hand-written forward and reverse passes.

Architecture (default 64x64 input, S=4):

    conv 3x3/2 (3->8) + ReLU -> conv 3x3/2 (8->16) + ReLU -> 2x2 average pool
    -> per-cell window of the pooled map (cell plus half a cell of context on
    each side, zero padded) -> shared linear head -> 4 box + 1 objectness + C
    class activations per cell.

Everything runs in float64. ReLU uses subgradient 0 at 0.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from advloop.render import LabelSet
from advloop.scene import NUM_CLASSES

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ADNN"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIHHHHHHHHI")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    grid: int = 4
    conv1: int = 8
    conv2: int = 16
    num_classes: int = NUM_CLASSES
    channels: int = 3
    pool: int = 2

    def __post_init__(self):
        if self.pool < 1 or self.resolution % (4 * self.pool):
            raise ValueError("resolution must be a multiple of 4 * pool")
        pooled = self.resolution // 4 // self.pool
        if pooled % self.grid or (pooled // self.grid) % 2:
            raise ValueError("pooled map size must be an even multiple of grid")

    @property
    def pool_stride(self) -> int:
        return self.resolution // 4 // self.pool // self.grid

    @property
    def window(self) -> int:
        return 2 * self.pool_stride

    @property
    def head_inputs(self) -> int:
        return self.window * self.window * self.conv2

    @property
    def outputs(self) -> int:
        return 5 + self.num_classes


@dataclass
class ModelParams:
    """Detector weights. Field order is the checkpoint serialization order."""

    conv1_w: np.ndarray  # (F1, 3, 3, C)
    conv1_b: np.ndarray
    conv2_w: np.ndarray  # (F2, 3, 3, F1)
    conv2_b: np.ndarray
    head_w: np.ndarray  # (window*window*F2, 5+K)
    head_b: np.ndarray
    config: ModelConfig = ModelConfig()
    epochs_trained: int = 0

    @classmethod
    def zeros(cls, config: ModelConfig = ModelConfig()) -> ModelParams:
        shapes = param_shapes(config)
        return cls(*(np.zeros(s) for s in shapes), config=config)

    @classmethod
    def init(cls, config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelParams:
        """Uniform(+-1/sqrt(fan_in)) initialization for weights and biases."""
        rng = np.random.default_rng(seed)
        arrays = []
        fans = [9 * config.channels, 9 * config.conv1, config.head_inputs]
        for shape, fan in zip(param_shapes(config), [f for f in fans for _ in (0, 1)]):
            bound = 1.0 / math.sqrt(fan)
            arrays.append(rng.uniform(-bound, bound, shape))
        return cls(*arrays, config=config)

    def arrays(self) -> list[np.ndarray]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b, self.head_w, self.head_b]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> ModelParams:
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.array(flat[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return ModelParams(*out, config=self.config, epochs_trained=self.epochs_trained)

    def copy(self) -> ModelParams:
        return self.with_flat(self.flatten())

    @property
    def count(self) -> int:
        return sum(a.size for a in self.arrays())


def param_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    return [
        (config.conv1, 3, 3, config.channels),
        (config.conv1,),
        (config.conv2, 3, 3, config.conv1),
        (config.conv2,),
        (config.head_inputs, config.outputs),
        (config.outputs,),
    ]


@dataclass(frozen=True)
class LossWeights:
    lambda_box: float = 7.5
    lambda_cls: float = 0.5
    lambda_dfl: float = 0.0

    def __post_init__(self):
        if min(self.lambda_box, self.lambda_cls, self.lambda_dfl) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    l_ciou: float
    l_bce: float
    l_dfl: float
    total: float


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    confidence: float
    cell: int = -1
    light_state: str = "none"


# ---------------------------------------------------------------- primitives


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _windows(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, out_h, out_w, k, k, c), (s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]), writeable=False
    )


def _scatter_windows(dwin: np.ndarray, shape, k: int, stride: int) -> np.ndarray:
    out = np.zeros(shape)
    _, oh, ow = dwin.shape[:3]
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dwin[:, :, :, i, j, :]
    return out


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    oh, ow = h // 2, wd // 2
    cols = _windows(xp, 3, 2, oh, ow).reshape(n * oh * ow, 9 * c)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, oh, ow, f), (cols, xp.shape)


def _conv_backward(dout, w, cache, need_input=True):
    cols, xp_shape = cache
    n, oh, ow, f = dout.shape
    d2 = dout.reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_input:
        dcols = (d2 @ w.reshape(f, -1)).reshape(n, oh, ow, 3, 3, w.shape[3])
        dxp = _scatter_windows(dcols, xp_shape, 3, 2)
        dx = dxp[:, 1:-1, 1:-1, :]
    return dx, dw, db


def _forward_batch(theta: ModelParams, images: np.ndarray):
    cfg = theta.config
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (cfg.resolution, cfg.resolution, cfg.channels):
        raise ValueError(f"image shape {x.shape[1:]} does not match model resolution {cfg.resolution}")
    z1, c1 = _conv_forward(x, theta.conv1_w, theta.conv1_b)
    a1 = np.maximum(z1, 0.0)
    z2, c2 = _conv_forward(a1, theta.conv2_w, theta.conv2_b)
    a2 = np.maximum(z2, 0.0)
    n, h2, w2, f2 = a2.shape
    q = cfg.pool
    pooled = a2.reshape(n, h2 // q, q, w2 // q, q, f2).mean(axis=(2, 4))
    p = cfg.pool_stride // 2
    pp = np.pad(pooled, ((0, 0), (p, p), (p, p), (0, 0)))
    feats = _windows(pp, cfg.window, cfg.pool_stride, cfg.grid, cfg.grid).reshape(n, cfg.grid, cfg.grid, -1)
    raw = feats @ theta.head_w + theta.head_b
    cache = (c1, z1, c2, z2, a2.shape, pp.shape, feats)
    return raw, cache


def _backward_batch(theta: ModelParams, draw: np.ndarray, cache, need_input=True, need_params=True):
    cfg = theta.config
    c1, z1, c2, z2, a2_shape, pp_shape, feats = cache
    n = draw.shape[0]
    grads = {}
    if need_params:
        grads["head_w"] = feats.reshape(-1, feats.shape[-1]).T @ draw.reshape(-1, draw.shape[-1])
        grads["head_b"] = draw.reshape(-1, draw.shape[-1]).sum(axis=0)
    dfeats = (draw @ theta.head_w.T).reshape(n, cfg.grid, cfg.grid, cfg.window, cfg.window, cfg.conv2)
    dpp = _scatter_windows(dfeats, pp_shape, cfg.window, cfg.pool_stride)
    p = cfg.pool_stride // 2
    dpooled = dpp[:, p : pp_shape[1] - p, p : pp_shape[2] - p, :]
    q = cfg.pool
    da2 = np.repeat(np.repeat(dpooled, q, axis=1), q, axis=2) / (q * q)
    dz2 = da2 * (z2 > 0)
    da1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(dz2, theta.conv2_w, c2)
    dz1 = da1 * (z1 > 0)
    dx, grads["conv1_w"], grads["conv1_b"] = _conv_backward(dz1, theta.conv1_w, c1, need_input=need_input)
    return dx, grads


def forward(theta: ModelParams, image: np.ndarray) -> np.ndarray:
    """Raw prediction (S, S, 5 + K) for one image: tx, ty, tw, th, objectness, class logits."""
    return _forward_batch(theta, image)[0][0]


# ---------------------------------------------------------------- boxes and CIoU


def decode_boxes(raw: np.ndarray) -> np.ndarray:
    """Map box activations (..., S, S, >=4) to normalized (cx, cy, w, h)."""
    s = raw.shape[-2]
    sg = sigmoid(raw[..., :4])
    cols = np.arange(s)[None, :]
    rows = np.arange(s)[:, None]
    cx = (cols + sg[..., 0]) / s
    cy = (rows + sg[..., 1]) / s
    return np.stack([cx, cy, sg[..., 2], sg[..., 3]], axis=-1)


def _ciou_terms(a: np.ndarray, b: np.ndarray):
    """CIoU and the partials w.r.t. the first box (cx, cy, w, h); rows are independent pairs."""
    x1, y1, w1, h1 = a.T
    x2, y2, w2, h2 = b.T
    al, ar, at, ab = x1 - w1 / 2, x1 + w1 / 2, y1 - h1 / 2, y1 + h1 / 2
    bl, br, bt, bb = x2 - w2 / 2, x2 + w2 / 2, y2 - h2 / 2, y2 + h2 / 2
    iw_raw = np.minimum(ar, br) - np.maximum(al, bl)
    ih_raw = np.minimum(ab, bb) - np.maximum(at, bt)
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    union = w1 * h1 + w2 * h2 - inter
    iou = inter / union
    cw = np.maximum(ar, br) - np.minimum(al, bl)
    ch = np.maximum(ab, bb) - np.minimum(at, bt)
    c2 = cw**2 + ch**2
    rho2 = (x1 - x2) ** 2 + (y1 - y2) ** 2
    k = 4.0 / math.pi**2
    dt = np.arctan(w2 / h2) - np.arctan(w1 / h1)
    v = k * dt**2
    denom = (1.0 - iou) + v
    safe = denom > 0
    dsafe = np.where(safe, denom, 1.0)
    alpha = np.where(safe, v / dsafe, 0.0)
    ciou = iou - rho2 / c2 - alpha * v

    # reverse pass for d ciou / d (x1, y1, w1, h1)
    g_iou = np.where(safe, 1.0 - (v / dsafe) ** 2, 1.0)
    g_v = np.where(safe, -v * (2.0 * (1.0 - iou) + v) / dsafe**2, 0.0)
    g_rho2 = -1.0 / c2
    g_c2 = rho2 / c2**2
    g_inter = g_iou * (union + inter) / union**2
    g_union_direct = -g_iou * inter / union**2  # union = w1h1 + w2h2 - inter, inter handled above
    g_iw = g_inter * ih * (iw_raw > 0)
    g_ih = g_inter * iw * (ih_raw > 0)
    g_cw, g_ch = g_c2 * 2 * cw, g_c2 * 2 * ch
    g_ar = g_iw * (ar <= br) + g_cw * (ar > br)
    g_al = -g_iw * (al >= bl) - g_cw * (al < bl)
    g_ab = g_ih * (ab <= bb) + g_ch * (ab > bb)
    g_at = -g_ih * (at >= bt) - g_ch * (at < bt)
    g_t1 = g_v * (-2.0 * k * dt)  # v depends on w1, h1 through atan(w1 / h1)
    r2 = w1**2 + h1**2
    g_x = g_ar + g_al + g_rho2 * 2 * (x1 - x2)
    g_y = g_ab + g_at + g_rho2 * 2 * (y1 - y2)
    g_w = (g_ar - g_al) / 2 + g_union_direct * h1 + g_t1 * h1 / r2
    g_h = (g_ab - g_at) / 2 + g_union_direct * w1 - g_t1 * w1 / r2
    return ciou, np.stack([g_x, g_y, g_w, g_h], axis=-1)


def ciou(box_a, box_b) -> float:
    """Complete IoU of two (cx, cy, w, h) boxes; 1 for identical boxes."""
    a = np.asarray(box_a, dtype=np.float64).reshape(1, 4)
    b = np.asarray(box_b, dtype=np.float64).reshape(1, 4)
    if np.any(a[:, 2:] <= 0) or np.any(b[:, 2:] <= 0):
        raise ValueError("ciou needs boxes with positive width and height")
    return float(_ciou_terms(a, b)[0][0])


def iou(box_a, box_b) -> float:
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    iw = max(0.0, min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2))
    ih = max(0.0, min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------- loss


def _targets(labels: LabelSet, grid: int):
    """Assign each ground-truth box to the cell holding its center.

    When two boxes share a cell the larger one is kept.
    """
    assigned = np.zeros((grid, grid), dtype=bool)
    tbox = np.zeros((grid, grid, 4))
    tcls = np.zeros((grid, grid), dtype=np.int64)
    area = np.zeros((grid, grid))
    for box, cls in zip(labels.boxes, labels.classes):
        col = min(int(box[0] * grid), grid - 1)
        row = min(int(box[1] * grid), grid - 1)
        a = box[2] * box[3]
        if assigned[row, col] and area[row, col] >= a:
            continue
        assigned[row, col] = True
        tbox[row, col] = box
        tcls[row, col] = cls
        area[row, col] = a
    return assigned, tbox, tcls


def _loss_and_grad(raw: np.ndarray, labels: LabelSet, weights: LossWeights, need_grad: bool = True):
    """Loss breakdown and d total / d raw for a single (S, S, 5+K) prediction."""
    s = raw.shape[0]
    k = raw.shape[-1] - 5
    assigned, tbox, tcls = _targets(labels, s)
    n_assigned = int(assigned.sum())
    draw = np.zeros_like(raw) if need_grad else None

    obj = raw[..., 4]
    tobj = assigned.astype(np.float64)
    bce_obj = np.logaddexp(0.0, obj) - obj * tobj
    l_bce = float(bce_obj.mean())
    if need_grad:
        draw[..., 4] = weights.lambda_cls * (sigmoid(obj) - tobj) / (s * s)

    l_ciou = 0.0
    if n_assigned:
        rows, cols = np.nonzero(assigned)
        cell_raw = raw[rows, cols]
        logits = cell_raw[:, 5:]
        onehot = np.eye(k)[tcls[rows, cols]]
        bce_cls = np.logaddexp(0.0, logits) - logits * onehot
        l_bce += float(bce_cls.sum() / n_assigned)

        sg = sigmoid(cell_raw[:, :4])
        pred = np.stack([(cols + sg[:, 0]) / s, (rows + sg[:, 1]) / s, sg[:, 2], sg[:, 3]], axis=1)
        cval, cgrad = _ciou_terms(pred, tbox[rows, cols])
        l_ciou = float(np.mean(1.0 - cval))
        if need_grad:
            draw[rows, cols, 5:] = weights.lambda_cls * (sigmoid(logits) - onehot) / n_assigned
            dpred = -weights.lambda_box * cgrad / n_assigned
            dsg = sg * (1.0 - sg)
            scale = np.array([1.0 / s, 1.0 / s, 1.0, 1.0])
            draw[rows, cols, :4] = dpred * scale * dsg
    l_dfl = 0.0
    total = weights.lambda_box * l_ciou + weights.lambda_cls * l_bce + weights.lambda_dfl * l_dfl
    return LossBreakdown(l_ciou, l_bce, l_dfl, total), draw


def loss(raw: np.ndarray, labels: LabelSet, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Composite detection loss for one raw prediction."""
    return _loss_and_grad(np.asarray(raw, dtype=np.float64), labels, weights, need_grad=False)[0]


def image_loss(theta: ModelParams, image: np.ndarray, labels: LabelSet, weights: LossWeights = LossWeights()) -> float:
    return loss(forward(theta, image), labels, weights).total


def batch_losses(theta: ModelParams, images: np.ndarray, labels: list[LabelSet], weights: LossWeights = LossWeights()) -> np.ndarray:
    raw, _ = _forward_batch(theta, images)
    return np.array([_loss_and_grad(r, y, weights, need_grad=False)[0].total for r, y in zip(raw, labels)])


# ---------------------------------------------------------------- gradients


def input_gradients(
    theta: ModelParams, images: np.ndarray, labels: list[LabelSet], weights: LossWeights = LossWeights()
) -> tuple[np.ndarray, np.ndarray]:
    """Per-image gradient of each image's own loss w.r.t. its pixels, plus the losses."""
    raw, cache = _forward_batch(theta, images)
    draw = np.empty_like(raw)
    totals = np.empty(len(raw))
    for i, (r, y) in enumerate(zip(raw, labels)):
        br, draw[i] = _loss_and_grad(r, y, weights)
        totals[i] = br.total
    dx, _ = _backward_batch(theta, draw, cache, need_params=False)
    return dx, totals


def input_gradient(theta: ModelParams, image: np.ndarray, labels: LabelSet, weights: LossWeights = LossWeights()) -> np.ndarray:
    """Exact d total / d pixels for one image, shaped like the image."""
    return input_gradients(theta, np.asarray(image)[None], [labels], weights)[0][0]


def param_gradient(
    theta: ModelParams, images: np.ndarray, labels: list[LabelSet], weights: LossWeights = LossWeights()
) -> tuple[ModelParams, float]:
    """Gradient of the batch-mean loss w.r.t. all parameters, and that mean loss."""
    raw, cache = _forward_batch(theta, images)
    n = len(raw)
    draw = np.empty_like(raw)
    total = 0.0
    for i, (r, y) in enumerate(zip(raw, labels)):
        br, draw[i] = _loss_and_grad(r, y, weights)
        total += br.total
    _, g = _backward_batch(theta, draw / n, cache, need_input=False)
    grads = ModelParams(*(g[f.name] for f in fields(ModelParams)[:6]), config=theta.config)
    return grads, total / n


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    lr_schedule: str = "cosine"
    final_lr_fraction: float = 0.05

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be > 0 and momentum in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must be in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for ``epoch``: constant, or cosine-annealed to ``final_lr_fraction``."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        if self.lr_schedule != "cosine":
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        frac = epoch / max(self.epochs - 1, 1)
        scale = self.final_lr_fraction + (1 - self.final_lr_fraction) * 0.5 * (1 + math.cos(math.pi * frac))
        return self.learning_rate * scale


def train(
    images: np.ndarray,
    labels: list[LabelSet],
    config: TrainConfig = TrainConfig(),
    weights: LossWeights = LossWeights(),
    model_config: ModelConfig = ModelConfig(),
    progress=None,
) -> tuple[ModelParams, list[float]]:
    """Mini-batch SGD with momentum; returns final params and per-epoch mean loss."""
    if len(images) == 0:
        raise ValueError("empty training set")
    images = np.asarray(images, dtype=np.float64)
    theta = ModelParams.init(model_config, config.seed)
    flat = theta.flatten()
    velocity = np.zeros_like(flat)
    rng = np.random.default_rng(config.seed + 1)
    curve = []
    n = len(images)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        lr = config.lr_at(epoch)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            grads, batch_loss = param_gradient(theta, images[idx], [labels[i] for i in idx], weights)
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            velocity = config.momentum * velocity - lr * grads.flatten()
            flat = flat + velocity
            theta = theta.with_flat(flat)
            epoch_loss += batch_loss * len(idx)
            seen += len(idx)
        curve.append(epoch_loss / seen)
        if not math.isfinite(curve[-1]):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        log.debug("epoch %d loss %.5f", epoch, curve[-1])
        if progress:
            progress(epoch, curve[-1], theta)
    theta.epochs_trained = config.epochs
    return theta, curve


# ---------------------------------------------------------------- decoding


def decode(raw: np.ndarray, conf_threshold: float = 0.25, nms_iou: float = 0.5) -> list[Detection]:
    """Confidence filter then greedy per-class NMS; ties go to the lower cell index."""
    if not (0 <= conf_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    raw = np.asarray(raw, dtype=np.float64)
    s = raw.shape[0]
    boxes = decode_boxes(raw).reshape(-1, 4)
    obj = sigmoid(raw[..., 4]).reshape(-1)
    logits = raw[..., 5:].reshape(s * s, -1)
    ex = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = ex / ex.sum(axis=1, keepdims=True)
    cls = probs.argmax(axis=1)
    conf = obj * probs.max(axis=1)
    cand = [i for i in range(s * s) if conf[i] >= conf_threshold]
    cand.sort(key=lambda i: (-conf[i], i))
    kept: list[Detection] = []
    for i in cand:
        box = _clamp_box(boxes[i])
        if any(d.class_id == cls[i] and iou(d.box, box) >= nms_iou for d in kept):
            continue
        kept.append(Detection(box, int(cls[i]), float(min(max(conf[i], 0.0), 1.0)), cell=i))
    return kept


def _clamp_box(b) -> tuple[float, float, float, float]:
    x0, x1 = np.clip([b[0] - b[2] / 2, b[0] + b[2] / 2], 0.0, 1.0)
    y0, y1 = np.clip([b[1] - b[3] / 2, b[1] + b[3] / 2], 0.0, 1.0)
    return (float((x0 + x1) / 2), float((y0 + y1) / 2), float(x1 - x0), float(y1 - y0))


def detect(theta: ModelParams, image: np.ndarray, conf_threshold: float = 0.25, nms_iou: float = 0.5) -> list[Detection]:
    return decode(forward(theta, image), conf_threshold, nms_iou)


def detect_batch(theta, images, conf_threshold=0.25, nms_iou=0.5, batch=128) -> list[list[Detection]]:
    out = []
    for start in range(0, len(images), batch):
        raw, _ = _forward_batch(theta, images[start : start + batch])
        out.extend(decode(r, conf_threshold, nms_iou) for r in raw)
    return out


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path: Path, theta: ModelParams) -> None:
    """ADNN file: header + config block, then little-endian f64 params in field order."""
    c = theta.config
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, c.resolution, c.resolution, c.channels,
        c.grid, c.conv1, c.conv2, c.num_classes, c.pool, theta.epochs_trained,
    )
    Path(path).write_bytes(header + theta.flatten().astype("<f8").tobytes())


def load_checkpoint(path: Path, require_trained: bool = False) -> ModelParams:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEADER.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, h, w, ch, grid, f1, f2, k, pool, epochs = _CKPT_HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not an ADNN checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if h != w:
        raise CheckpointError("only square inputs are supported")
    try:
        config = ModelConfig(h, grid, f1, f2, k, ch, pool)
    except ValueError as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from exc
    template = ModelParams.zeros(config)
    flat = np.frombuffer(buf, dtype="<f8", offset=_CKPT_HEADER.size)
    if flat.size != template.count:
        raise CheckpointError(f"expected {template.count} parameters, found {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise CheckpointError("checkpoint has non-finite parameters")
    if require_trained and epochs == 0:
        raise CheckpointError("checkpoint is untrained")
    theta = template.with_flat(flat.astype(np.float64))
    theta.epochs_trained = epochs
    return theta
