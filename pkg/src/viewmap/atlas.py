"""The view-centric map: local field models anchored to keyframes, driven by tracker events."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import AtlasConfig, FieldConfig, RenderConfig, field_config_from_dict, to_dict, _from_dict
from .field import LocalFieldModel, init_model, load_model, mark_occupancy, propagate_features, save_model
from .geom import CameraIntrinsics, Pose, pose_distance, rays_in_frame
from .render import compute_losses, render_rays

log = logging.getLogger(__name__)


class AtlasError(RuntimeError):
    pass


@dataclass
class Keyframe:
    id: int
    pose: Pose
    image: np.ndarray | None
    intrinsics: CameraIntrinsics
    depth: np.ndarray | None = None  # z-depth in meters, 0 = invalid
    primary_model: int = -1
    is_test: bool = False

    def __post_init__(self):
        if self.image is not None:
            h, w = self.image.shape[:2]
            if (h, w) != (self.intrinsics.height, self.intrinsics.width):
                raise AtlasError(f"keyframe {self.id}: image {w}x{h} does not match intrinsics")


class CovisibilityGraph:
    """Undirected weighted graph over keyframe ids."""

    def __init__(self):
        self.adjacency: dict[int, dict[int, float]] = {}

    def add_node(self, kid: int) -> None:
        self.adjacency.setdefault(kid, {})

    def add_edge(self, a: int, b: int, weight: float = 1.0) -> None:
        if a == b:
            return
        self.add_node(a)
        self.add_node(b)
        self.adjacency[a][b] = self.adjacency[a].get(b, 0.0) + weight
        self.adjacency[b][a] = self.adjacency[b].get(a, 0.0) + weight

    def neighbors(self, kid: int) -> set[int]:
        return set(self.adjacency.get(kid, {}))

    def to_dict(self) -> dict:
        return {str(k): {str(j): w for j, w in sorted(v.items())} for k, v in sorted(self.adjacency.items())}

    @classmethod
    def from_dict(cls, data: dict) -> CovisibilityGraph:
        g = cls()
        g.adjacency = {int(k): {int(j): float(w) for j, w in v.items()} for k, v in data.items()}
        return g


@dataclass
class AssignmentReport:
    keyframe: int
    primary_model: int
    created: bool = False
    propagated_from: int | None = None
    also_in: list[int] = field(default_factory=list)
    capped: bool = False


@dataclass
class StepReport:
    model_id: int
    loss: float = float("nan")
    parts: dict[str, float] = field(default_factory=dict)
    skipped: bool = False


def _model_seed(seed: int, model_id: int) -> int:
    return int(np.random.SeedSequence([seed, model_id]).generate_state(1)[0])


class Atlas:
    """Owns the models and keyframes; one writer consumes the tracker stream."""

    def __init__(self, field_cfg: FieldConfig | None = None, render_cfg: RenderConfig | None = None,
                 atlas_cfg: AtlasConfig | None = None):
        self.field_cfg = field_cfg or FieldConfig()
        self.render_cfg = render_cfg or RenderConfig()
        self.cfg = atlas_cfg or AtlasConfig()
        self.models: list[LocalFieldModel] = []
        self.keyframes: dict[int, Keyframe] = {}
        self.test_frames: dict[int, Keyframe] = {}
        self.graph = CovisibilityGraph()
        self.rng = np.random.default_rng(self.cfg.seed)
        self.torch_gen = torch.Generator().manual_seed(self.cfg.seed)
        self.latest_keyframe: int | None = None
        self.last_draws: list[int] = []
        self._dirs: dict[CameraIntrinsics, np.ndarray] = {}

    # -- helpers ---------------------------------------------------------

    def anchor_pose(self, model_id: int) -> Pose:
        return self.keyframes[self.models[model_id].anchor_keyframe].pose

    def pixel_dirs(self, intr: CameraIntrinsics) -> np.ndarray:
        if intr not in self._dirs:
            self._dirs[intr] = intr.pixel_directions().reshape(-1, 3)
        return self._dirs[intr]

    def covisible_models(self, kid: int) -> set[int]:
        """Primary models of ``kid`` and of its covisible training frames."""
        ids = {self.keyframes[j].primary_model for j in self.graph.neighbors(kid) if j in self.keyframes}
        if kid in self.keyframes and self.keyframes[kid].primary_model >= 0:
            ids.add(self.keyframes[kid].primary_model)
        ids.discard(-1)
        return ids

    # -- tracker events --------------------------------------------------

    def register_test_frame(self, kf: Keyframe, covisible=()) -> None:
        if kf.id in self.keyframes or kf.id in self.test_frames:
            raise AtlasError(f"duplicate keyframe id {kf.id}")
        kf.is_test = True
        self.test_frames[kf.id] = kf
        self.graph.add_node(kf.id)
        for j in covisible:
            self.graph.add_edge(kf.id, j)

    def on_keyframe(self, kf: Keyframe, covisible=()) -> AssignmentReport:
        """Assign a new training keyframe, creating a model when it is far from all covisible ones."""
        if kf.id in self.keyframes or kf.id in self.test_frames:
            raise AtlasError(f"duplicate keyframe id {kf.id}")
        covisible = set(covisible)
        unknown = covisible - set(self.keyframes) - set(self.test_frames)
        if unknown:
            raise AtlasError(f"covisible ids {sorted(unknown)} unknown")
        cov_models = sorted({self.keyframes[j].primary_model for j in covisible if j in self.keyframes})
        self.keyframes[kf.id] = kf
        self.graph.add_node(kf.id)
        for j in covisible:
            self.graph.add_edge(kf.id, j)
        self.latest_keyframe = kf.id

        report = AssignmentReport(kf.id, -1)
        far = not cov_models or all(pose_distance(kf.pose, self.anchor_pose(m)) > self.cfg.d_th for m in cov_models)
        if far and len(self.models) < self.cfg.max_models:
            report.propagated_from = self._propagation_source(kf.pose)
            primary = self.create_model(kf.id)
            report.created = True
            report.propagated_from = report.propagated_from if self.cfg.propagate else None
            others = cov_models
        elif far:
            # model cap: join the nearest (covisible if any) model regardless of d_th
            candidates = cov_models or list(range(len(self.models)))
            primary = min(candidates, key=lambda m: (pose_distance(kf.pose, self.anchor_pose(m)), m))
            others = [m for m in cov_models if m < primary]
            report.capped = True
            log.info("model cap %d reached; keyframe %d joins model %d", self.cfg.max_models, kf.id, primary)
        else:
            primary = max(cov_models)
            others = [m for m in cov_models if m != primary]
        kf.primary_model = primary
        self.models[primary].training_frames.add(kf.id)
        for m in others:
            self.models[m].training_frames.add(kf.id)
        report.primary_model = primary
        report.also_in = sorted(others)
        return report

    def _propagation_source(self, pose: Pose) -> int | None:
        if not self.models:
            return None
        return min(range(len(self.models)), key=lambda m: (pose_distance(pose, self.anchor_pose(m)), m))

    def create_model(self, anchor_kf: int) -> int:
        """New model anchored at ``anchor_kf``, propagated from the nearest existing anchor."""
        if len(self.models) >= self.cfg.max_models:
            raise AtlasError(f"model cap {self.cfg.max_models} reached")
        mid = len(self.models)
        model = init_model(mid, anchor_kf, self.field_cfg, _model_seed(self.cfg.seed, mid))
        src = self._propagation_source(self.keyframes[anchor_kf].pose)
        if src is not None and self.cfg.propagate:
            rel = self.anchor_pose(src).inverse().compose(self.keyframes[anchor_kf].pose)
            propagate_features(self.models[src], model, rel)
        self.models.append(model)
        return mid

    def apply_pose_update(self, updates: dict[int, Pose]) -> None:
        """Overwrite keyframe poses. Model parameters are never touched."""
        missing = [k for k in updates if k not in self.keyframes and k not in self.test_frames]
        if missing:
            raise AtlasError(f"pose update for unknown keyframes {missing}")
        for k, pose in updates.items():
            (self.keyframes.get(k) or self.test_frames[k]).pose = pose

    # -- training --------------------------------------------------------

    def schedule_training_step(self, latest_kf: int | None = None) -> list[int]:
        """Up to two newest covisible models of the latest frame plus one random model."""
        if not self.models:
            raise AtlasError("no models to train")
        latest_kf = self.latest_keyframe if latest_kf is None else latest_kf
        cov = sorted(self.covisible_models(latest_kf), reverse=True) if latest_kf is not None else []
        chosen = cov[: max(0, self.cfg.models_per_step - 1)]
        self.last_draws = []
        if len(chosen) < self.cfg.models_per_step:
            for _ in range(len(self.models)):
                pick = int(self.rng.integers(len(self.models)))
                self.last_draws.append(pick)
                if pick not in chosen:
                    chosen.append(pick)
                    break
        return chosen

    def sample_batch(self, model: LocalFieldModel, n_rays: int):
        """Random rays over the model's training frames, in the model's local frame."""
        frames = sorted(model.training_frames)
        anchor = self.keyframes[model.anchor_keyframe].pose
        which = self.rng.integers(len(frames), size=n_rays)
        origins = np.empty((n_rays, 3))
        dirs = np.empty((n_rays, 3))
        rgb = np.empty((n_rays, 3))
        depth = np.zeros(n_rays)
        for i, kid in enumerate(frames):
            sel = np.nonzero(which == i)[0]
            if sel.size == 0:
                continue
            kf = self.keyframes[kid]
            d_cam = self.pixel_dirs(kf.intrinsics)
            pix = self.rng.integers(d_cam.shape[0], size=sel.size)
            o, d = rays_in_frame(kf.pose, d_cam[pix], anchor)
            origins[sel], dirs[sel] = o, d
            rgb[sel] = kf.image.reshape(-1, 3)[pix]
            if kf.depth is not None:
                depth[sel] = kf.depth.reshape(-1)[pix] / d_cam[pix, 2]
        return origins, dirs, rgb, depth

    def train_step(self, model_ids: list[int]) -> list[StepReport]:
        """One Adam step of the full loss for each listed model."""
        reports = []
        dt = self.field_cfg.torch_dtype
        for mid in model_ids:
            model = self.models[mid]
            if not model.training_frames:
                reports.append(StepReport(mid, skipped=True))
                continue
            o, d, rgb, depth = self.sample_batch(model, self.cfg.rays_per_batch)
            o, d, rgb, depth = (torch.as_tensor(x, dtype=dt) for x in (o, d, rgb, depth))
            out = render_rays(model, o, d, self.render_cfg, train=True, generator=self.torch_gen)
            total, parts = compute_losses(out, rgb, depth, depth > 0, self.render_cfg)
            opt = model.optimizer()
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            mark_occupancy(model, out.sample_points, out.weights.detach())
            model.steps += 1
            loss = float(total.detach())
            model.loss_history.append(loss)
            scalars = {k: float(torch.as_tensor(v).detach()) for k, v in vars(parts).items()}
            reports.append(StepReport(mid, loss, scalars))
        return reports

    # -- checkpoints -----------------------------------------------------

    def save(self, directory: str | Path) -> Path:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        for m in self.models:
            save_model(m, root / f"model_{m.id:02d}.npz")

        def kf_entry(kf: Keyframe):
            i = kf.intrinsics
            return {"pose": kf.pose.to_list(), "primary_model": kf.primary_model, "test": kf.is_test,
                    "intrinsics": [i.fx, i.fy, i.cx, i.cy, i.width, i.height]}

        manifest = {
            "models": [f"model_{m.id:02d}.npz" for m in self.models],
            "keyframes": {str(k): kf_entry(kf) for k, kf in sorted(self.keyframes.items())},
            "test_frames": {str(k): kf_entry(kf) for k, kf in sorted(self.test_frames.items())},
            "graph": self.graph.to_dict(),
            "latest_keyframe": self.latest_keyframe,
            "field": to_dict(self.field_cfg),
            "render": to_dict(self.render_cfg),
            "atlas": to_dict(self.cfg),
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return root

    @classmethod
    def load(cls, directory: str | Path) -> Atlas:
        """Restore models, poses, assignments and graph (images are not stored)."""
        root = Path(directory)
        man = json.loads((root / "manifest.json").read_text())
        atlas = cls(field_config_from_dict(man["field"]), _from_dict(RenderConfig, man["render"]),
                    _from_dict(AtlasConfig, man["atlas"]))
        atlas.models = [load_model(root / name) for name in man["models"]]

        def kf_from(k, e):
            fx, fy, cx, cy, w, h = e["intrinsics"]
            return Keyframe(int(k), Pose.from_list(e["pose"]), None, CameraIntrinsics(fx, fy, cx, cy, int(w), int(h)),
                            primary_model=e["primary_model"], is_test=e["test"])

        atlas.keyframes = {int(k): kf_from(k, e) for k, e in man["keyframes"].items()}
        atlas.test_frames = {int(k): kf_from(k, e) for k, e in man["test_frames"].items()}
        atlas.graph = CovisibilityGraph.from_dict(man["graph"])
        atlas.latest_keyframe = man["latest_keyframe"]
        return atlas


def world_centric_config(cfg: AtlasConfig) -> AtlasConfig:
    """Single world model: one model anchored at the first keyframe, never split."""
    import dataclasses

    return dataclasses.replace(cfg, d_th=float("inf"), max_models=1)
