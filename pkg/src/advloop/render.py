"""Synthetic front-camera renderer and labelled dataset generation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from advloop.scene import NUM_CLASSES, ObjectKind, Scene, TrackSpec, VehicleState, sample_scene

IMAGE_MAGIC = b"ADIM"
_IMAGE_HEADER = struct.Struct("<4sHHB")

DEFAULT_PALETTE = {
    "sky": (0.55, 0.70, 0.85),
    "floor": (0.22, 0.22, 0.24),
    "lane": (0.95, 0.85, 0.15),
    "vehicle": (0.15, 0.35, 0.90),
    "stop_sign": (0.85, 0.10, 0.10),
    "traffic_light": (0.45, 0.20, 0.55),
    "lamp_red": (1.00, 0.40, 0.25),
    "lamp_green": (0.15, 0.85, 0.35),
    "intersection": (0.95, 0.95, 0.95),
}


@dataclass(frozen=True)
class RenderParams:
    height: int = 64
    width: int = 64
    camera_fov: float = math.pi / 2
    horizon_row: float = 24.0
    camera_height: float = 0.25
    noise_sigma: float = 0.02
    min_distance: float = 0.05
    max_distance: float = 2.5
    marking_width: float = 0.02
    min_box_pixels: int = 6
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.horizon_row < self.height:
            raise ValueError("horizon_row must lie inside the image")

    @property
    def focal(self) -> float:
        return (self.width / 2) / math.tan(self.camera_fov / 2)


@dataclass(frozen=True, eq=False)
class LabelSet:
    """Normalized (cx, cy, w, h) boxes with one class id per box."""

    boxes: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(boxes) != len(classes):
            raise ValueError("boxes and classes differ in length")
        if np.any(boxes < 0) or np.any(boxes > 1) or np.any(boxes[:, 2:] <= 0):
            raise ValueError("boxes must lie in [0,1] with positive size")
        if np.any(classes < 0) or np.any(classes >= NUM_CLASSES):
            raise ValueError("class id out of range")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "classes", classes)

    def __len__(self) -> int:
        return len(self.classes)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabelSet)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.classes, other.classes)
        )

    @classmethod
    def empty(cls) -> LabelSet:
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class Sample:
    index: int
    image: np.ndarray
    labels: LabelSet


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def _ground_mask(track: TrackSpec, state: VehicleState, params: RenderParams) -> np.ndarray:
    """Boolean mask of lane-marking pixels from the flat-ground projection."""
    h, w, f = params.height, params.width, params.focal
    rows = np.arange(h) + 0.5 - params.horizon_row
    cols = (w / 2) - (np.arange(w) + 0.5)
    mask = np.zeros((h, w), dtype=bool)
    ground = rows > 0
    if not ground.any():
        return mask
    dist = f * params.camera_height / rows[ground]
    near = dist <= params.max_distance
    row_idx = np.nonzero(ground)[0][near]
    dist = dist[near]
    lat = cols[None, :] * dist[:, None] / f
    c, s = math.cos(state.heading), math.sin(state.heading)
    gx = state.x + dist[:, None] * c - lat * s
    gy = state.y + dist[:, None] * s + lat * c
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    d = track.distance_many(pts).reshape(gx.shape)
    band = np.abs(d - track.lane_width / 2) <= params.marking_width / 2
    mask[row_idx] = band
    return mask


def _object_rect(obj, state: VehicleState, params: RenderParams):
    """Pixel rectangle (r0, r1, c0, c1) of a billboard, or None if not visible."""
    dx, dy = obj.pose.x - state.x, obj.pose.y - state.y
    c, s = math.cos(state.heading), math.sin(state.heading)
    fwd = dx * c + dy * s
    lat = -dx * s + dy * c
    if fwd <= params.min_distance or fwd > params.max_distance:
        return None
    f = params.focal
    width, height = obj.size
    cx = params.width / 2 - f * lat / fwd
    half = f * width / (2 * fwd)
    top = params.horizon_row - f * (obj.elevation + height - params.camera_height) / fwd
    bottom = params.horizon_row - f * (obj.elevation - params.camera_height) / fwd
    c0, c1 = _round(cx - half), _round(cx + half)
    r0, r1 = _round(top), _round(bottom)
    c0, c1 = max(c0, 0), min(c1, params.width)
    r0, r1 = max(r0, 0), min(r1, params.height)
    if c1 - c0 < params.min_box_pixels or r1 - r0 < params.min_box_pixels:
        return None
    return r0, r1, c0, c1, fwd


def rasterize(scene: Scene, state: VehicleState, params: RenderParams):
    """Noise-free render. Returns (image, labels, object-id mask with -1 for none)."""
    pal = {k: np.asarray(v, dtype=np.float64) for k, v in params.palette.items()}
    h, w = params.height, params.width
    img = np.empty((h, w, 3))
    hz = min(max(_round(params.horizon_row), 0), h)
    img[:hz] = pal["sky"]
    img[hz:] = pal["floor"]
    img[_ground_mask(scene.track, state, params)] = pal["lane"]

    rects = []
    for i, obj in enumerate(scene.objects):
        r = _object_rect(obj, state, params)
        if r is not None:
            rects.append((r[4], i, r[:4]))
    rects.sort(key=lambda t: (t[0], t[1]))
    occupied = np.zeros((h, w), dtype=bool)
    accepted = []
    for _, i, (r0, r1, c0, c1) in rects:
        area = (r1 - r0) * (c1 - c0)
        free = area - int(occupied[r0:r1, c0:c1].sum())
        if free < 0.9 * area:
            continue  # mostly hidden: neither drawn nor labelled
        occupied[r0:r1, c0:c1] = True
        accepted.append((i, (r0, r1, c0, c1)))

    ids = np.full((h, w), -1, dtype=np.int64)
    boxes, classes = [], []
    for i, (r0, r1, c0, c1) in reversed(accepted):
        obj = scene.objects[i]
        name = ObjectKind(obj.kind).name.lower()
        img[r0:r1, c0:c1] = pal[name]
        if obj.kind == ObjectKind.TRAFFIC_LIGHT:
            m = (c1 - c0) // 4
            side = max(1, (c1 - c0) - 2 * m)
            img[r0 + m : min(r0 + m + side, r1), c0 + m : c1 - m] = pal[f"lamp_{obj.light_state}"]
        ids[r0:r1, c0:c1] = i
    for i, (r0, r1, c0, c1) in sorted(accepted):
        boxes.append(((c0 + c1) / 2 / w, (r0 + r1) / 2 / h, (c1 - c0) / w, (r1 - r0) / h))
        classes.append(int(scene.objects[i].kind))
    labels = LabelSet(np.array(boxes).reshape(-1, 4), np.array(classes, dtype=np.int64))
    return img, labels, ids


def render_frame(scene: Scene, vehicle_state: VehicleState, params: RenderParams, rng_seed) -> tuple[np.ndarray, LabelSet]:
    """Render the front view with seeded Gaussian noise, clamped to [0, 1]."""
    img, labels, _ = rasterize(scene, vehicle_state, params)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        img = img + rng.normal(0.0, params.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), labels


def gen_dataset(
    n: int,
    train_fraction: float,
    seed: int,
    track: TrackSpec,
    params: RenderParams | None = None,
) -> tuple[list[Sample], list[Sample]]:
    """Render ``n`` labelled frames and split them by a seeded shuffle."""
    if n < 10:
        raise ValueError("n must be at least 10")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    params = params or RenderParams()
    samples = []
    for i in range(n):
        scene = sample_scene(np.random.SeedSequence([seed, i, 0]), track)
        img, labels = render_frame(scene, scene.viewpoint, params, np.random.SeedSequence([seed, i, 1]))
        samples.append(Sample(i, img, labels))
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def encode_image(img: np.ndarray) -> bytes:
    h, w, c = img.shape
    return _IMAGE_HEADER.pack(IMAGE_MAGIC, h, w, c) + np.asarray(img, dtype="<f4").tobytes()


def decode_image(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode an ADIM image; returns (image as float64, bytes consumed)."""
    if len(buf) < _IMAGE_HEADER.size:
        raise ValueError("truncated image header")
    magic, h, w, c = _IMAGE_HEADER.unpack_from(buf)
    if magic != IMAGE_MAGIC:
        raise ValueError("bad image magic")
    end = _IMAGE_HEADER.size + h * w * c * 4
    if len(buf) < end:
        raise ValueError("truncated image data")
    data = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=_IMAGE_HEADER.size)
    return data.astype(np.float64).reshape(h, w, c), end


def format_labels(labels: LabelSet) -> str:
    lines = [
        f"{c} {' '.join(repr(float(v)) for v in box)}" for c, box in zip(labels.classes, labels.boxes)
    ]
    return "".join(line + "\n" for line in lines)


def parse_labels(text: str) -> LabelSet:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows:
        return LabelSet.empty()
    return LabelSet(np.array([[float(v) for v in r[1:5]] for r in rows]), np.array([int(r[0]) for r in rows]))


def write_dataset(directory: Path, samples: list[Sample]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        (directory / f"frame_{s.index:05d}.adim").write_bytes(encode_image(s.image))
        (directory / f"frame_{s.index:05d}.txt").write_text(format_labels(s.labels))


def read_dataset(directory: Path) -> list[Sample]:
    directory = Path(directory)
    files = sorted(directory.glob("frame_*.adim"))
    if not files:
        raise FileNotFoundError(f"no frames in {directory}")
    out = []
    for f in files:
        img, _ = decode_image(f.read_bytes())
        labels = parse_labels(f.with_suffix(".txt").read_text())
        out.append(Sample(int(f.stem.split("_")[1]), img, labels))
    return out
