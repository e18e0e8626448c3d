"""Command line: ``run`` the online mapper over a stream, ``eval`` a checkpoint, ``gen`` a stream, ``report``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tracksim
from .atlas import Atlas, Keyframe, world_centric_config
from .blend import render_novel_view, save_novel_view, to_z_depth
from .config import RunConfig, load_config, save_config
from .geom import Pose
from .metrics import l1_depth, psnr, ssim
from .tracksim import END, KEYFRAME, POSE_UPDATE, TrackerEvent, read_stream

log = logging.getLogger("viewmap")

METRICS = ("psnr", "ssim", "l1_depth")


@dataclass
class MetricRecord:
    step: int  # keyframe events consumed so far
    tag: str  # interval | pre_update | post_update | final
    frames: list[int] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    l1_depth: list[float] = field(default_factory=list)

    def mean(self, name: str) -> float:
        return float(np.mean(getattr(self, name)))

    def std(self, name: str) -> float:
        return float(np.std(getattr(self, name)))


# ---------------------------------------------------------------------------
# scene rescaling


@dataclass(frozen=True)
class Similarity:
    """x -> scale * (x - center); rotations are untouched."""

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def pose(self, p: Pose) -> Pose:
        return Pose.from_rotation(p.rotation, self.scale * (p.translation - np.asarray(self.center)))

    @classmethod
    def fit(cls, events: list[TrackerEvent]) -> Similarity:
        """Center the stamped trajectory's bounding box and bring its bounding radius to 1."""
        pts = np.array([ev.keyframe.pose.translation for ev in events if ev.tag == KEYFRAME])
        if len(pts) == 0:
            return cls()
        c = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        r = float(np.max(np.linalg.norm(pts - c, axis=1)))
        return cls(tuple(float(x) for x in c), 1.0 / r if r > 0 else 1.0)


def _keyframe(data: tracksim.KeyframeData, sim: Similarity) -> Keyframe:
    return Keyframe(data.id, sim.pose(data.pose), data.image, data.intrinsics,
                    depth=data.depth * sim.scale, is_test=data.is_test)


# ---------------------------------------------------------------------------
# pipeline


def build_atlas(cfg: RunConfig) -> Atlas:
    acfg = dataclasses.replace(cfg.atlas, seed=cfg.seed)
    if cfg.mode == "world_centric_single":
        acfg = world_centric_config(acfg)
    rcfg = dataclasses.replace(cfg.render, rgb_only=cfg.rgb_only or cfg.render.rgb_only)
    return Atlas(cfg.field, rcfg, acfg)


def evaluate_test_frames(atlas: Atlas, step: int, tag: str, scale: float = 1.0,
                         render_dir: Path | None = None) -> MetricRecord:
    """Render every held-out frame seen so far from its current pose and score it against GT."""
    rec = MetricRecord(step, tag)
    for kid in sorted(atlas.test_frames):
        kf = atlas.test_frames[kid]
        view = render_novel_view(atlas, kf.pose, kf.intrinsics)
        rec.frames.append(kid)
        rec.psnr.append(psnr(np.clip(view.image, 0, 1), kf.image))
        rec.ssim.append(ssim(np.clip(view.image, 0, 1), kf.image))
        mask = kf.depth > 0
        z = to_z_depth(view.depth, kf.intrinsics)
        rec.l1_depth.append(l1_depth(z, kf.depth, mask) / scale if mask.any() else float("nan"))
        if render_dir is not None:
            save_novel_view(view, render_dir / f"{step:04d}_{tag}", kid, kf.intrinsics, debug_layers=True)
    return rec


def _fmt(x: float) -> str:
    return repr(float(x))  # shortest string that round-trips exactly


def write_metrics(records: list[MetricRecord], out: Path) -> None:
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "tag", "frame", *METRICS])
        for r in records:
            for i, kid in enumerate(r.frames):
                w.writerow([r.step, r.tag, kid, *(_fmt(getattr(r, m)[i]) for m in METRICS)])
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "tag", "n_frames", *(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))])
        for r in records:
            w.writerow([r.step, r.tag, len(r.frames), *(_fmt(fn(m)) for m in METRICS for fn in (r.mean, r.std))])


def run_pipeline(cfg: RunConfig, events: list[TrackerEvent] | None = None) -> Path:
    """Consume the stream, train between keyframes, evaluate held-out frames, write artifacts."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    if events is None:
        events = read_stream(cfg.stream)
    sim = Similarity.fit(events) if cfg.rescale else Similarity()
    atlas = build_atlas(cfg)
    render_dir = out / "renders" if cfg.save_renders else None

    records: list[MetricRecord] = []
    timing: list[dict] = []
    update_steps: list[int] = []
    assignments: list[dict] = []
    n_kf = 0

    def evaluate(tag: str) -> None:
        if atlas.models and atlas.test_frames:
            records.append(evaluate_test_frames(atlas, n_kf, tag, sim.scale, render_dir))

    for ev in events:
        if ev.tag == KEYFRAME:
            kf = _keyframe(ev.keyframe, sim)
            n_kf += 1
            if kf.is_test:
                atlas.register_test_frame(kf, ev.covisible)
            else:
                rep = atlas.on_keyframe(kf, ev.covisible)
                assignments.append(dataclasses.asdict(rep))
                t0 = time.perf_counter()
                for _ in range(cfg.n_train):
                    atlas.train_step(atlas.schedule_training_step())
                timing.append({"keyframe": kf.id, "train_seconds": time.perf_counter() - t0,
                               "n_models": len(atlas.models)})
            if n_kf % cfg.eval_interval == 0:
                evaluate("interval")
        elif ev.tag == POSE_UPDATE:
            evaluate("pre_update")
            atlas.apply_pose_update({k: sim.pose(p) for k, p in ev.updates.items()})
            update_steps.append(n_kf)
            evaluate("post_update")
        elif ev.tag == END:
            evaluate("final")
            break

    write_metrics(records, out)
    atlas.save(out / "checkpoint")
    summary = {
        "mode": cfg.mode,
        "n_keyframes": n_kf,
        "n_models": len(atlas.models),
        "update_steps": update_steps,
        "rescale": {"center": list(sim.center), "scale": sim.scale},
        "assignments": assignments,
        "model_steps": [m.steps for m in atlas.models],
    }
    (out / "run.json").write_text(json.dumps(summary, indent=1))
    (out / "timing.json").write_text(json.dumps(timing, indent=1))
    if records:
        emit_report([out])
    return out


def eval_checkpoint(run_dir: str | Path, stream: str | Path | None = None) -> MetricRecord:
    """Re-score a saved atlas against the GT images of its stream's held-out frames."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.toml")
    info = json.loads((run_dir / "run.json").read_text())
    atlas = Atlas.load(run_dir / "checkpoint")
    sim = Similarity(tuple(info["rescale"]["center"]), info["rescale"]["scale"])
    for ev in read_stream(stream or cfg.stream):
        if ev.tag == KEYFRAME and ev.keyframe.id in atlas.test_frames:
            kf = atlas.test_frames[ev.keyframe.id]
            kf.image = ev.keyframe.image
            kf.depth = ev.keyframe.depth * sim.scale
    return evaluate_test_frames(atlas, info["n_keyframes"], "eval", sim.scale)


# ---------------------------------------------------------------------------
# reports


def read_summary(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "summary.csv"
    if not path.exists():
        raise FileNotFoundError(f"no metrics table in {run_dir}")
    with open(path) as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["step"] = int(r["step"])
        r["n_frames"] = int(r["n_frames"])
        for k in list(r):
            if k.endswith("_mean") or k.endswith("_std"):
                r[k] = float(r[k])
    return rows


def update_effect(run_dir: str | Path, metric: str = "psnr") -> dict[str, float]:
    """Metric change across the first pose update and its mean over the records after it."""
    rows = read_summary(run_dir)
    tags = [r["tag"] for r in rows]
    if "pre_update" not in tags or "post_update" not in tags:
        raise ValueError(f"{run_dir}: no pose update recorded")
    i_pre, i_post = tags.index("pre_update"), tags.index("post_update")
    # one value per step: the END evaluation can repeat an interval evaluation of the same state
    by_step = {rows[i_post]["step"]: rows[i_post][f"{metric}_mean"]}
    for r in rows[i_post + 1:]:
        if r["step"] != rows[i_post]["step"]:
            by_step[r["step"]] = r[f"{metric}_mean"]
    after = list(by_step.values())
    return {
        "pre": rows[i_pre][f"{metric}_mean"],
        "post": rows[i_post][f"{metric}_mean"],
        "drop": rows[i_pre][f"{metric}_mean"] - rows[i_post][f"{metric}_mean"],
        "post_window_mean": float(np.mean(after)),
        "final": rows[-1][f"{metric}_mean"],
    }


def emit_report(run_dirs: list[str | Path], out: str | Path | None = None,
                labels: list[str] | None = None) -> Path:
    """Time-series plots per metric (pose updates marked) and, for several runs, a side-by-side table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dirs = [Path(d) for d in run_dirs]
    out = Path(out) if out is not None else run_dirs[0]
    out.mkdir(parents=True, exist_ok=True)
    labels = labels or [d.name for d in run_dirs]
    tables = [read_summary(d) for d in run_dirs]
    updates = set()
    for d in run_dirs:
        info = d / "run.json"
        if info.exists():
            updates.update(json.loads(info.read_text())["update_steps"])

    for m in METRICS:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for label, rows in zip(labels, tables):
            x = [r["step"] for r in rows]
            ax.plot(x, [r[f"{m}_mean"] for r in rows], marker="o", ms=3, label=label)
        for u in sorted(updates):
            ax.axvline(u, color="gray", ls="--", lw=1)
            ax.annotate("pose update", (u, 1), xycoords=("data", "axes fraction"), ha="right", va="top",
                        fontsize=8, rotation=90)
        ax.set_xlabel("keyframes consumed")
        ax.set_ylabel(m)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"timeseries_{m}.png", dpi=100)
        plt.close(fig)

    if len(tables) > 1:
        keys: list[tuple[int, str]] = []
        for rows in tables:
            for r in rows:
                if (r["step"], r["tag"]) not in keys:
                    keys.append((r["step"], r["tag"]))
        lookup = [{(r["step"], r["tag"]): r for r in rows} for rows in tables]
        with open(out / "ab_table.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "tag", *(f"{lab}:{m}" for lab in labels for m in METRICS)])
            for key in keys:
                cells = []
                for lk in lookup:
                    r = lk.get(key)
                    cells += [_fmt(r[f"{m}_mean"]) if r else "" for m in METRICS]
                w.writerow([*key, *cells])
    return out


# ---------------------------------------------------------------------------
# argument parsing


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _converter(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        return lambda s: tuple(float(x) for x in s.split(","))
    return type(default)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; flags override it")
    p.add_argument("--mode", choices=["view_centric", "world_centric_single"])
    p.add_argument("--rgb-only", dest="rgb_only", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--stream")
    p.add_argument("--out")
    base = RunConfig()
    named = {"mode", "rgb_only", "seed", "stream", "out"}
    for f in dataclasses.fields(RunConfig):
        value = getattr(base, f.name)
        if f.name in named:
            continue
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                d = getattr(value, sub.name)
                p.add_argument(f"--{f.name}.{sub.name}", dest=f"{f.name}.{sub.name}", type=_converter(d),
                               metavar=type(d).__name__.upper())
        else:
            p.add_argument(f"--{f.name}", type=_converter(value), metavar=type(value).__name__.upper())


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for key, value in vars(args).items():
        if value is None or key in ("config", "command", "func", "verbose"):
            continue
        if "." in key:
            section, name = key.split(".", 1)
            setattr(getattr(cfg, section), name, value)
        elif hasattr(cfg, key):
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def _cmd_run(args) -> dict:
    cfg = config_from_args(args)
    if not cfg.stream:
        raise ValueError("--stream is required")
    out = run_pipeline(cfg)
    return {"out": str(out)}


def _cmd_eval(args) -> dict:
    rec = eval_checkpoint(args.run, args.stream)
    result = {"step": rec.step, "frames": rec.frames, **{f"{m}_mean": rec.mean(m) for m in METRICS}} \
        if rec.frames else {"frames": []}
    out = Path(args.out) if args.out else Path(args.run)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result, indent=1))
    return result


def _cmd_gen(args) -> dict:
    lc = None if args.no_loop_closure else args.loop_close_at
    path = tracksim.generate(args.out, seed=args.seed, n_keyframes=args.n_keyframes, kind=args.kind,
                             radius=args.radius, drift_rate=args.drift_rate, drift_rate_rot=args.drift_rate_rot,
                             loop_close_at=lc, covis_radius=args.covis_radius, width=args.width,
                             height=args.height, test_every=args.test_every, laps=args.laps)
    return {"stream": str(path)}


def _cmd_report(args) -> dict:
    out = emit_report(args.runs, args.out, args.labels)
    result = {"out": str(out)}
    if len(args.runs) > 1:
        effects = {}
        for d in args.runs:
            try:
                effects[str(d)] = update_effect(d)
            except ValueError:
                pass
        result["update_effect"] = effects
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewmap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the online mapper over an event stream")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="re-score a run's checkpoint")
    p.add_argument("run", help="run directory")
    p.add_argument("--stream")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gen", help="generate a synthetic stream")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-keyframes", type=int, default=40)
    p.add_argument("--kind", choices=["loop", "line"], default="loop")
    p.add_argument("--laps", type=float, default=1.0)
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--drift-rate", type=float, default=0.02)
    p.add_argument("--drift-rate-rot", type=float, default=0.01)
    p.add_argument("--loop-close-at", type=int, default=-1, help="-1: last keyframe")
    p.add_argument("--no-loop-closure", action="store_true")
    p.add_argument("--covis-radius", type=float, default=0.0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--test-every", type=int, default=10)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("report", help="plots and A/B table from run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--labels", nargs="+")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # one machine-readable line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
