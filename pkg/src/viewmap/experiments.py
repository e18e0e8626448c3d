"""Experiment drivers shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path

import numpy as np

from .atlas import Atlas, Keyframe
from .blend import render_model_view
from .cli import Similarity, run_pipeline, update_effect
from .config import AtlasConfig, FieldConfig, RenderConfig, RunConfig
from .geom import CameraIntrinsics
from .metrics import psnr
from .tracksim import generate, generate_trajectory, make_scene, raytrace_gt

log = logging.getLogger(__name__)


def overfit(n_views: int = 8, steps: int = 3000, seed: int = 0, rays_per_batch: int = 1024,
            eval_every: int = 500, field_cfg: FieldConfig | None = None,
            render_cfg: RenderConfig | None = None, size: int = 64, scale: float = 0.5) -> dict:
    """Train one model on ``n_views`` neighboring loop views and track mean training-view PSNR."""
    scene = make_scene(seed)
    intr = CameraIntrinsics.from_fov(size, size, 70.0)
    poses = generate_trajectory("loop", 40, radius=2.0)[:n_views]
    sim = Similarity(scale=scale)  # 0.5 matches the pipeline's rescaling of the 2 m loop radius to 1
    atlas = Atlas(field_cfg, render_cfg,
                  AtlasConfig(d_th=float("inf"), max_models=1, rays_per_batch=rays_per_batch, seed=seed))
    for k, p in enumerate(poses):
        img, dep = raytrace_gt(scene, p, intr)
        atlas.on_keyframe(Keyframe(k, sim.pose(p), img, intr, depth=dep * sim.scale), set(range(k)))

    def score() -> float:
        vals = [psnr(np.clip(render_model_view(atlas, 0, kf.pose, intr)[0], 0, 1), kf.image)
                for kf in atlas.keyframes.values()]
        return float(np.mean(vals))

    history = []
    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        atlas.train_step([0])
        if step % eval_every == 0 or step == steps:
            history.append((step, score()))
            log.info("step %d  psnr %.2f  (%.0fs)", step, history[-1][1], time.perf_counter() - t0)
    return {"history": history, "final_psnr": history[-1][1], "atlas": atlas,
            "loss_history": list(atlas.models[0].loss_history)}


# the loop stream: 1.25 laps, loop closed just after the camera returns to its start
LOOP_STREAM = dict(n_keyframes=50, kind="loop", laps=1.25, loop_close_at=40, drift_rate=0.02,
                   drift_rate_rot=0.01, test_every=10)


def make_loop_stream(out_dir: str | Path, seed: int = 0, **overrides) -> Path:
    return generate(out_dir, seed=seed, **{**LOOP_STREAM, **overrides})


def loop_runs(stream: str | Path, out_dir: str | Path, seed: int = 0, n_train: int = 30,
              rays_per_batch: int = 1024, modes=("view_centric", "world_centric_single"),
              extra: dict | None = None) -> dict[str, Path]:
    """Run the same stream in each mode (and the no-propagation variant if asked)."""
    out_dir = Path(out_dir)
    runs = {}
    for mode in modes:
        name = mode
        cfg = RunConfig(mode="view_centric" if mode == "view_centric_noprop" else mode, seed=seed,
                        stream=str(stream), out=str(out_dir / name), n_train=n_train)
        cfg.atlas = dataclasses.replace(cfg.atlas, rays_per_batch=rays_per_batch,
                                        propagate=mode != "view_centric_noprop")
        for key, value in (extra or {}).items():
            section, attr = key.split(".")
            setattr(getattr(cfg, section), attr, value)
        t0 = time.perf_counter()
        runs[name] = run_pipeline(cfg)
        log.info("%s finished in %.0fs", name, time.perf_counter() - t0)
    return runs


def loop_comparison(runs: dict[str, Path]) -> dict[str, dict[str, float]]:
    return {name: update_effect(path) for name, path in runs.items()}


def early_losses(run_dir: str | Path, first: int = 41, last: int = 50) -> dict[int, float]:
    """Mean training loss over steps ``first..last`` of every model created after the first."""
    from .atlas import Atlas as _Atlas

    atlas = _Atlas.load(Path(run_dir) / "checkpoint")
    out = {}
    for m in atlas.models[1:]:
        hist = m.loss_history[first - 1:last]
        if len(hist) == last - first + 1:
            out[m.id] = float(np.mean(hist))
    return out
