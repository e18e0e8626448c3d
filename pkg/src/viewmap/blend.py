"""Novel views from several local models, blended in image space by inverse distance."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import Atlas, AtlasError
from .geom import CameraIntrinsics, Pose, rays_in_frame
from .render import render_batch
from .tracksim import save_depth, save_image

DIST_EPS = 1e-6


@dataclass
class BlendSelection:
    model_ids: list[int]
    nearest_views: list[int]
    distances: list[float]
    weights: list[float]
    anchor_view: int = -1  # training keyframe nearest to the query camera


@dataclass
class NovelView:
    image: np.ndarray
    depth: np.ndarray
    selection: BlendSelection
    layers: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def blend_weights(distances, power: float = 4.0, eps: float = DIST_EPS) -> np.ndarray:
    d = np.maximum(np.asarray(distances, dtype=np.float64), eps)
    # divide by the smallest distance first so tiny eps does not overflow
    w = (d.min() / d) ** power
    return w / w.sum()


def select_models(atlas: Atlas, test_pose: Pose, top_k: int | None = None,
                  power: float | None = None) -> BlendSelection:
    """Rank models by how close their member views are to the training view nearest the camera.

    The ranking goes through that nearest training view; the weights use the
    distance from the camera itself to each chosen model's nearest member.
    """
    top_k = atlas.cfg.blend_top_k if top_k is None else top_k
    power = atlas.cfg.blend_power if power is None else power
    if not atlas.models or not atlas.keyframes:
        raise AtlasError("cannot blend from an empty atlas")
    o = test_pose.translation
    ids = sorted(atlas.keyframes)
    pos = {k: atlas.keyframes[k].pose.translation for k in ids}
    near_kf = min(ids, key=lambda k: (float(np.linalg.norm(pos[k] - o)), k))

    ranked = []
    for m in atlas.models:
        members = sorted(m.training_frames & set(ids))
        if not members:
            continue
        d_rank = min(float(np.linalg.norm(pos[j] - pos[near_kf])) for j in members)
        t_i = min(members, key=lambda j: (float(np.linalg.norm(pos[j] - o)), j))
        ranked.append((d_rank, m.id, t_i, float(np.linalg.norm(pos[t_i] - o))))
    ranked.sort()
    chosen = ranked[:top_k]
    dists = [c[3] for c in chosen]
    return BlendSelection(
        model_ids=[c[1] for c in chosen],
        nearest_views=[c[2] for c in chosen],
        distances=dists,
        weights=blend_weights(dists, power).tolist(),
        anchor_view=near_kf,
    )


def render_model_view(atlas: Atlas, model_id: int, pose: Pose, intr: CameraIntrinsics,
                      use_skipping: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Full image of one model, with the camera re-expressed in the model's anchor frame."""
    dirs_cam = intr.pixel_directions().reshape(-1, 3)
    o, d = rays_in_frame(pose, dirs_cam, atlas.anchor_pose(model_id))
    color, depth, _ = render_batch(atlas.models[model_id], o, d, atlas.render_cfg, use_skipping=use_skipping)
    h, w = intr.height, intr.width
    return color.double().numpy().reshape(h, w, 3), depth.double().numpy().reshape(h, w)


def render_novel_view(atlas: Atlas, test_pose: Pose, intr: CameraIntrinsics,
                      selection: BlendSelection | None = None, use_skipping: bool = True) -> NovelView:
    sel = selection or select_models(atlas, test_pose)
    image = np.zeros((intr.height, intr.width, 3))
    depth = np.zeros((intr.height, intr.width))
    layers = {}
    for mid, w in zip(sel.model_ids, sel.weights):
        img_m, dep_m = render_model_view(atlas, mid, test_pose, intr, use_skipping)
        layers[mid] = (img_m, dep_m)
        image += w * img_m
        depth += w * dep_m
    if len(sel.model_ids) == 1:
        # exact copy; avoids 1.0 * x rounding questions entirely
        image, depth = layers[sel.model_ids[0]]
    return NovelView(image, depth, sel, layers)


def to_z_depth(ray_depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    return ray_depth * intr.pixel_directions()[..., 2]


def save_novel_view(view: NovelView, directory: str | Path, frame: int, intr: CameraIntrinsics,
                    debug_layers: bool = False) -> list[Path]:
    """8-bit color and 16-bit millimeter z-depth files, optionally one pair per model."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    written = []

    def put(suffix, img, dep):
        p_img = root / f"frame_{frame:04d}{suffix}.png"
        p_dep = root / f"frame_{frame:04d}{suffix}_depth.png"
        save_image(p_img, np.clip(img, 0.0, 1.0))
        save_depth(p_dep, to_z_depth(dep, intr))
        written.extend([p_img, p_dep])

    put("", view.image, view.depth)
    if debug_layers:
        for mid, (img, dep) in sorted(view.layers.items()):
            put(f"_model{mid:02d}", img, dep)
    return written
