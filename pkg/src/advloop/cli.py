"""``advloop`` command line: gen-data, train, eval, run, serve, drive, report.

Directory layout under ``--out`` (default ``results``)::

    data/train, data/test          rendered frames (gen-data)
    model.adnn, loss_curve.csv     checkpoint and per-epoch loss (train)
    eval/metrics.csv               clean + attack grid rows (eval)
    eval/confusion/<row>.csv       confusion matrix per eval row
    run/metrics.csv                one row per closed-loop scenario (run)
    run/episodes/<scenario>/       ticks.csv, frames.csv, events.jsonl
    report/*.svg, compliance.txt   figures and table (report)

Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
usage, 3 missing input file, 4 invalid or untrained checkpoint, 5 network
link failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from advloop.config import ConfigError, ExperimentConfig

log = logging.getLogger("advloop")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_CHECKPOINT, EXIT_LINK = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(EXIT_MISSING, f"missing {what}: {path}")
    return path


def _checkpoint(args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(args.out) / "model.adnn"


def _load_theta(args):
    from advloop.perception import CheckpointError, load_checkpoint

    path = _require(_checkpoint(args), "checkpoint")
    try:
        return load_checkpoint(path, require_trained=True)
    except CheckpointError as exc:
        raise CliError(EXIT_CHECKPOINT, f"bad checkpoint {path}: {exc}") from exc


def _read_split(out: Path, split: str):
    from advloop.render import read_dataset

    d = _require(out / "data" / split, f"{split} dataset (run gen-data first)")
    try:
        return read_dataset(d)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, str(exc)) from exc


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig, args) -> None:
    from advloop.render import gen_dataset, write_dataset

    out = Path(args.out)
    train, test = gen_dataset(
        cfg["render.n_frames"], cfg["render.train_fraction"], cfg["render.seed"], cfg.track(), cfg.render_params()
    )
    write_dataset(out / "data" / "train", train)
    write_dataset(out / "data" / "test", test)
    (out / "config.txt").parent.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    log.info("wrote %d train / %d test frames", len(train), len(test))


def cmd_train(cfg: ExperimentConfig, args) -> None:
    from advloop.perception import save_checkpoint, train

    out = Path(args.out)
    samples = _read_split(out, "train")
    images = np.stack([s.image for s in samples])
    labels = [s.labels for s in samples]
    t0 = time.monotonic()

    def progress(epoch, value, _theta):
        log.info("epoch %d/%d loss %.5f (%.0f s)", epoch + 1, cfg["model.epochs"], value, time.monotonic() - t0)

    theta, curve = train(images, labels, cfg.train_config(), cfg.loss_weights(), cfg.model_config(), progress)
    ckpt = _checkpoint(args)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, theta)
    with (out / "loss_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(v)])
    log.info("saved %s after %.0f s", ckpt, time.monotonic() - t0)


def eval_grid(cfg: ExperimentConfig) -> list[tuple[str, str, float]]:
    grid = [("clean", "none", 0.0)]
    for kind in cfg["eval.attacks"]:
        grid += [(f"{kind}_{e:g}", kind, e) for e in cfg["eval.epsilons"]]
    return grid


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    from advloop.metrics import CONFUSION_LABELS, confusion_from, precision_recall_from, predict, write_metrics_csv

    out = Path(args.out)
    theta = _load_theta(args)
    test = _read_split(out, "test")
    labels = [s.labels for s in test]
    settings = cfg.eval_settings()
    rows = []
    conf_dir = out / "eval" / "confusion"
    conf_dir.mkdir(parents=True, exist_ok=True)
    for name, kind, eps in eval_grid(cfg):
        preds = predict(theta, test, cfg.attack_config(kind, eps), settings, cfg.loss_weights())
        p, r = precision_recall_from(preds, labels, settings.iou_threshold)
        cm = confusion_from(preds, labels, settings.iou_threshold)
        with (conf_dir / f"{name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["truth", *CONFUSION_LABELS])
            for lab, row in zip(CONFUSION_LABELS, cm):
                w.writerow([lab, *map(int, row)])
        rows.append({"scenario": name, "attack": kind, "epsilon": eps, "delay_ms": 0.0, "loss_pct": 0.0,
                     "precision": p, "recall": r})
        log.info("%-10s P=%.3f R=%.3f", name, p, r)
    write_metrics_csv(out / "eval" / "metrics.csv", rows)


def _episode_row(name, cfg, delay, loss_pct, ep, report):
    from advloop.metrics import pr_from_counts

    tp, fp, fn = ep.detection_counts
    p, r = pr_from_counts(tp, fp, fn)
    atk = cfg.attack_config()
    row = {
        "scenario": name, "attack": atk.kind, "epsilon": atk.epsilon, "delay_ms": delay, "loss_pct": loss_pct,
        "precision": p, "recall": r, "lat_rms": report.lateral_rms, "lap_completed": report.lap_completed,
    }
    for i, s in enumerate(report.stops, start=1):
        row[f"stop{i}"] = s.passed
    return row


def cmd_run(cfg: ExperimentConfig, args) -> None:
    from advloop.loop import run_episode
    from advloop.metrics import compliance, write_metrics_csv

    out = Path(args.out)
    theta = _load_theta(args)
    track = cfg.track()
    rows = []
    for name, delay, loss in cfg.scenarios():
        jitter = cfg["eval.jitter_ms"] if delay > 0 else 0.0
        up = cfg.condition("uplink", delay, loss, min(jitter, delay))
        down = cfg.condition("downlink", delay, loss, min(jitter, delay))
        t0 = time.monotonic()
        ep = run_episode(cfg.loop_config(up, down), track, theta)
        ep.write(out / "run" / "episodes" / name)
        rep = compliance(ep, track, cfg.compliance_settings())
        rows.append(_episode_row(name, cfg, delay, loss * 100, ep, rep))
        log.info(
            "%-12s lap=%s stops=%s rms=%.4f (%.0f s)", name, rep.lap_completed,
            "".join("P" if s.passed else "F" for s in rep.stops), rep.lateral_rms, time.monotonic() - t0,
        )
    write_metrics_csv(out / "run" / "metrics.csv", rows)


def cmd_serve(cfg: ExperimentConfig, args) -> None:
    from advloop.loop import serve_cloud
    from advloop.netchan.tcp import tcp_serve

    theta = _load_theta(args)
    with tcp_serve(args.bind) as server:
        log.info("listening on %s", server.address)
        print(server.address, flush=True)
        with server.accept(timeout=args.accept_timeout) as conn:
            handled = serve_cloud(conn, theta, cfg.loop_config())
            log.info("link closed (%s) after %d frames", conn.down_reason, handled)


def cmd_drive(cfg: ExperimentConfig, args) -> None:
    from advloop.loop import drive_vehicle
    from advloop.metrics import compliance
    from advloop.netchan.tcp import ConnectFailed, tcp_connect

    try:
        conn = tcp_connect(args.connect)
    except ConnectFailed as exc:
        raise CliError(EXIT_LINK, str(exc)) from exc
    track = cfg.track()
    with conn:
        ep = drive_vehicle(conn, cfg.loop_config(), track)
    target = Path(args.out) / "drive"
    ep.write(target)
    rep = compliance(ep, track, cfg.compliance_settings())
    log.info("drive finished: lap=%s rms=%.4f, log in %s", rep.lap_completed, rep.lateral_rms, target)


# ---------------------------------------------------------------- report


def _read_confusions(directory: Path) -> dict[str, list[list[int]]]:
    out = {}
    for f in sorted(directory.glob("*.csv")):
        with f.open() as fh:
            rows = list(csv.reader(fh))[1:]
        out[f.stem] = [[int(v) for v in r[1:]] for r in rows]
    return out


def _pr_figure(eval_rows) -> str:
    from advloop.svg import PALETTE, Axes, Canvas

    c = Canvas(760, 360)
    clean = [r for r in eval_rows if r["attack"] == "none"]
    attacks = sorted({r["attack"] for r in eval_rows if r["attack"] != "none"})
    eps_all = sorted({float(r["epsilon"]) for r in eval_rows})
    for k, metric in enumerate(("precision", "recall")):
        ax = Axes(c, 70 + k * 360, 40, 280, 250, (0, max(eps_all) * 1.05 or 1), (0, 1.0))
        ax.frame(f"{metric.title()} vs attack budget", "epsilon", metric, eps_all, (0, 0.25, 0.5, 0.75, 1.0))
        entries = []
        for j, kind in enumerate(attacks):
            pts = [(0.0, float(clean[0][metric]))] if clean else []
            pts += sorted((float(r["epsilon"]), float(r[metric])) for r in eval_rows if r["attack"] == kind)
            ax.series([p[0] for p in pts], [p[1] for p in pts], PALETTE[j], kind)
            entries.append((kind.upper(), PALETTE[j]))
        ax.legend(entries)
    return c.render()


def _confusion_figure(confusions: dict) -> str:
    from advloop.metrics import CONFUSION_LABELS
    from advloop.svg import Canvas, heatmap

    names = [n for n in ("clean", "fgsm_0.02", "pgd_0.02") if n in confusions] or sorted(confusions)[:3]
    short = [lab.replace("_", " ")[:10] for lab in CONFUSION_LABELS]
    cell = 44
    c = Canvas(140 + len(names) * (cell * 5 + 130), cell * 5 + 110)
    for i, n in enumerate(names):
        heatmap(c, 110 + i * (cell * 5 + 130), 60, cell, confusions[n], short, short, title=n)
    c.text(10, c.height - 10, "rows: ground truth, columns: prediction", size=10)
    return c.render()


def _trajectory_figure(track, episodes: dict) -> str:
    from advloop.svg import PALETTE, Axes, Canvas

    c = Canvas(720, 560)
    pts = track.centerline
    ax = Axes(c, 60, 40, 560, 460, (pts[:, 0].min() - 0.3, pts[:, 0].max() + 0.3),
              (pts[:, 1].min() - 0.3, pts[:, 1].max() + 0.3), equal=True)
    ax.frame("Vehicle trajectories", "x [m]", "y [m]")
    loop = np.vstack([pts, pts[:1]])
    ax.series(loop[:, 0], loop[:, 1], "#bbbbbb", markers=False, width=8)
    for s in track.stop_lines:
        p = track.point_at(s)
        c.circle(ax.px(p.x), ax.py(p.y), 4, fill="#000")
    entries = []
    for j, (name, ep) in enumerate(episodes.items()):
        color = PALETTE[j % len(PALETTE)]
        step = max(1, len(ep.xs) // 1500)
        ax.series(ep.xs[::step], ep.ys[::step], color, markers=False, width=1.2)
        entries.append((name, color))
    ax.legend(entries, x=ax.x + ax.w - 140, y=ax.y + 20)
    return c.render()


def _loss_figure(curve: list[float]) -> str:
    from advloop.svg import Axes, Canvas

    c = Canvas(520, 320)
    hi = max(curve) if curve else 1.0
    ax = Axes(c, 70, 30, 420, 230, (0, max(len(curve) - 1, 1)), (0, hi * 1.05))
    ticks = [round(hi * k / 4, 2) for k in range(5)]
    ax.frame("Training loss", "epoch", "mean loss", (), ticks)
    ax.series(list(range(len(curve))), curve, "#1f77b4", markers=False)
    return c.render()


def compliance_table(run_rows) -> str:
    head = f"{'scenario':<14}{'delay_ms':>9}{'loss_pct':>9}  {'stop1':<6}{'stop2':<6}{'stop3':<6}{'lap':<5}{'lat_rms':>8}\n"
    lines = [head, "-" * (len(head) - 1) + "\n"]
    mark = {"1": "PASS", "0": "FAIL"}
    for r in run_rows:
        lines.append(
            f"{r['scenario']:<14}{float(r['delay_ms']):>9g}{float(r['loss_pct']):>9g}  "
            f"{mark.get(r['stop1'], '?'):<6}{mark.get(r['stop2'], '?'):<6}{mark.get(r['stop3'], '?'):<6}"
            f"{'yes' if r['lap_completed'] == '1' else 'no':<5}{float(r['lat_rms']):>8.4f}\n"
        )
    return "".join(lines)


def cmd_report(cfg: ExperimentConfig, args) -> None:
    from advloop.loop import EpisodeLog
    from advloop.metrics import read_metrics_csv

    out = Path(args.out)
    eval_csv = _require(out / "eval" / "metrics.csv", "eval results (run eval first)")
    run_csv = _require(out / "run" / "metrics.csv", "run results (run run first)")
    conf_dir = _require(out / "eval" / "confusion", "confusion matrices")
    eval_rows, run_rows = read_metrics_csv(eval_csv), read_metrics_csv(run_csv)
    episodes = {}
    for r in run_rows:
        d = _require(out / "run" / "episodes" / r["scenario"], "episode log")
        episodes[r["scenario"]] = EpisodeLog.read(d)
    confusions = _read_confusions(conf_dir)
    if not eval_rows or not run_rows or not confusions:
        raise CliError(EXIT_MISSING, "results are empty")
    curve = []
    if (out / "loss_curve.csv").exists():
        with (out / "loss_curve.csv").open() as fh:
            curve = [float(r["loss"]) for r in csv.DictReader(fh)]

    # render everything first so a failure leaves no partial report
    docs = {
        "pr.svg": _pr_figure(eval_rows),
        "confusion.svg": _confusion_figure(confusions),
        "trajectories.svg": _trajectory_figure(cfg.track(), episodes),
        "compliance.txt": compliance_table(run_rows),
    }
    if curve:
        docs["loss_curve.svg"] = _loss_figure(curve)
    rep = out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    for name, text in docs.items():
        (rep / name).write_text(text)
    log.info("report written to %s", rep)


# ---------------------------------------------------------------- entry


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "run": cmd_run,
    "serve": cmd_serve,
    "drive": cmd_drive,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value experiment config file")
    common.add_argument("--out", default="results", help="results directory (default: results)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.adnn)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="advloop", description="Adversarial closed-loop driving testbed")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "serve":
            sp.add_argument("--bind", default="127.0.0.1:7000")
            sp.add_argument("--accept-timeout", type=float, default=None)
        if name == "drive":
            sp.add_argument("--connect", default="127.0.0.1:7000")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s: %(message)s"
    )
    try:
        if args.config and not Path(args.config).exists():
            raise CliError(EXIT_MISSING, f"missing config file: {args.config}")
        cfg = ExperimentConfig.load(Path(args.config) if args.config else None)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg.override_seed(args.seed)
            cfg.validate()
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except ConnectionError as exc:
        log.error("link failure: %s", exc)
        return EXIT_LINK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
