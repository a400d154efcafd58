"""Detection and driving metrics: matching, precision/recall, confusion, stop compliance."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from advloop.attack import AttackConfig, apply_attack
from advloop.perception import Detection, LossWeights, ModelParams, detect_batch, iou
from advloop.render import LabelSet, Sample
from advloop.scene import CLASS_NAMES, NUM_CLASSES, TrackSpec

BACKGROUND = NUM_CLASSES
CONFUSION_LABELS = (*CLASS_NAMES, "background")

METRICS_COLUMNS = (
    "scenario", "attack", "epsilon", "delay_ms", "loss_pct", "precision", "recall",
    "lat_rms", "lap_completed", "stop1", "stop2", "stop3",
)


@dataclass
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: list[tuple[int, int]] = field(default_factory=list)


def _greedy_match(preds: list[Detection], gts: LabelSet, iou_threshold: float, class_aware: bool):
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    used = set()
    pairs = []
    for pi in order:
        p = preds[pi]
        best, best_iou = None, -1.0
        for gi in range(len(gts)):
            if gi in used or (class_aware and gts.classes[gi] != p.class_id):
                continue
            v = iou(p.box, gts.boxes[gi])
            if v >= iou_threshold and v > best_iou:
                best, best_iou = gi, v
        if best is not None:
            used.add(best)
            pairs.append((pi, best))
    return pairs


def match_detections(preds: list[Detection], gts: LabelSet, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy confidence-ordered, class-gated matching."""
    pairs = _greedy_match(preds, gts, iou_threshold, class_aware=True)
    tp = len(pairs)
    return MatchResult(tp, len(preds) - tp, len(gts) - tp, pairs)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den  # 0/0 convention


def pr_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float]:
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn)


@dataclass(frozen=True)
class EvalSettings:
    conf_threshold: float = 0.25
    nms_iou: float = 0.5
    iou_threshold: float = 0.5


def predict(theta: ModelParams, dataset: list[Sample], attack: AttackConfig, settings: EvalSettings = EvalSettings(),
            weights: LossWeights = LossWeights()) -> list[list[Detection]]:
    if not dataset:
        raise ValueError("empty dataset")
    images = np.stack([s.image for s in dataset])
    labels = [s.labels for s in dataset]
    adv = apply_attack(theta, images, labels, attack, weights)
    return detect_batch(theta, adv, settings.conf_threshold, settings.nms_iou)


def precision_recall_from(preds: list[list[Detection]], labels: list[LabelSet], iou_threshold: float = 0.5):
    tp = fp = fn = 0
    for p, y in zip(preds, labels):
        m = match_detections(p, y, iou_threshold)
        tp, fp, fn = tp + m.true_positives, fp + m.false_positives, fn + m.false_negatives
    return pr_from_counts(tp, fp, fn)


def precision_recall(theta, dataset, attack_config: AttackConfig, settings: EvalSettings = EvalSettings()):
    """Dataset-level precision and recall under the given attack."""
    preds = predict(theta, dataset, attack_config, settings)
    return precision_recall_from(preds, [s.labels for s in dataset], settings.iou_threshold)


def confusion_from(preds: list[list[Detection]], labels: list[LabelSet], iou_threshold: float = 0.5) -> np.ndarray:
    """Rows = ground truth, columns = prediction, last index = background."""
    cm = np.zeros((NUM_CLASSES + 1, NUM_CLASSES + 1), dtype=np.int64)
    for p, y in zip(preds, labels):
        pairs = _greedy_match(p, y, iou_threshold, class_aware=False)
        mp = {pi for pi, _ in pairs}
        mg = {gi for _, gi in pairs}
        for pi, gi in pairs:
            cm[y.classes[gi], p[pi].class_id] += 1
        for gi in range(len(y)):
            if gi not in mg:
                cm[y.classes[gi], BACKGROUND] += 1
        for pi in range(len(p)):
            if pi not in mp:
                cm[BACKGROUND, p[pi].class_id] += 1
    return cm


def confusion(theta, dataset, attack_config: AttackConfig, settings: EvalSettings = EvalSettings()) -> np.ndarray:
    preds = predict(theta, dataset, attack_config, settings)
    return confusion_from(preds, [s.labels for s in dataset], settings.iou_threshold)


def background_mass(cm: np.ndarray) -> int:
    """Ground-truth objects that ended in the background column."""
    return int(cm[:BACKGROUND, BACKGROUND].sum())


def diagonal_mass(cm: np.ndarray) -> int:
    return int(np.trace(cm[:BACKGROUND, :BACKGROUND]))


# ---------------------------------------------------------------- compliance


@dataclass(frozen=True)
class ComplianceSettings:
    speed_threshold: float = 0.02
    min_dwell: float = 1.0
    zone_length: float = 0.15


@dataclass
class StopResult:
    passed: bool
    min_speed: float
    dwell: float
    visits: int


@dataclass
class ComplianceReport:
    stops: list[StopResult]
    lap_completed: bool
    lateral_rms: float
    max_deviation: float
    progress: float


def _unwrap_progress(s: np.ndarray, lap: float) -> np.ndarray:
    ds = np.diff(s)
    ds = np.where(ds < -lap / 2, ds + lap, ds)
    ds = np.where(ds > lap / 2, ds - lap, ds)
    return np.concatenate([[0.0], np.cumsum(ds)])


def compliance_from_trajectory(
    times: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    speeds: np.ndarray,
    track: TrackSpec,
    settings: ComplianceSettings = ComplianceSettings(),
) -> ComplianceReport:
    """Score a trajectory against the stop lines.

    A stop line's zone is the ``zone_length`` metres of centerline ending at
    the line. Each time the vehicle crosses the line, the preceding stay in the
    zone must contain a run of ticks with speed <= threshold lasting at least
    ``min_dwell``. A line passes iff it was crossed or reached at least once and
    every visit complied. A visit cut short by the end of the log (line not yet
    crossed) counts only if it has already complied; otherwise it is
    inconclusive and ignored.
    """
    times = np.asarray(times, dtype=np.float64)
    speeds = np.abs(np.asarray(speeds, dtype=np.float64))
    pts = np.stack([np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)], axis=1)
    _, s, dev = track.project_many(pts)
    lap = track.lap_length
    progress = _unwrap_progress(s, lap)
    start = s[0]
    dt = np.diff(times, append=times[-1] + (times[-1] - times[-2] if len(times) > 1 else 0.0))

    stops = []
    for line in track.stop_lines:
        # distance remaining to the line along travel, in the unwrapped frame
        first = (line - start) % lap
        visits, passes, min_speed, best_dwell = 0, 0, math.inf, 0.0
        k = 0
        while first + k * lap - settings.zone_length <= progress.max():
            target = first + k * lap
            ahead = target - progress
            in_zone = (ahead >= 0) & (ahead <= settings.zone_length)
            k += 1
            if not in_zone.any():
                if (progress >= target).any():
                    visits += 1  # crossed without ever being seen in the zone
                continue
            slow = in_zone & (speeds <= settings.speed_threshold)
            run = longest = 0.0
            for flag, d in zip(slow, dt):
                run = run + d if flag else 0.0
                longest = max(longest, run)
            complied = longest >= settings.min_dwell - 1e-9
            if not complied and not (progress > target).any():
                continue  # log ended before this approach finished
            visits += 1
            min_speed = min(min_speed, float(speeds[in_zone].min()))
            best_dwell = max(best_dwell, longest)
            passes += int(complied)
        ok = bool(visits > 0 and passes == visits)
        stops.append(StopResult(ok, min_speed if visits else math.nan, best_dwell, visits))

    return ComplianceReport(
        stops=stops,
        lap_completed=bool(progress.max() >= lap),
        lateral_rms=float(np.sqrt(np.mean(dev**2))),
        max_deviation=float(np.abs(dev).max()),
        progress=float(progress.max()),
    )


def compliance(log, track: TrackSpec, settings: ComplianceSettings = ComplianceSettings()) -> ComplianceReport:
    """Score an EpisodeLog (applied speed is taken as the vehicle speed)."""
    return compliance_from_trajectory(log.times, log.xs, log.ys, np.asarray(log.v), track, settings)


def write_metrics_csv(path: Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in METRICS_COLUMNS})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def read_metrics_csv(path: Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
