"""Simulated tracker: synthetic scenes, trajectories, drift and the keyframe event stream.

The JSON-lines stream written by :func:`write_stream` is the boundary between
tracking and mapping; any tracker that emits it can drive the mapper.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .geom import CameraIntrinsics, GeometryError, Pose, look_at

KEYFRAME = "KEYFRAME"
POSE_UPDATE = "POSE_UPDATE"
END = "END"


class StreamError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class GroundPlane:
    height: float
    albedo: tuple[float, float, float]
    albedo2: tuple[float, float, float]
    checker: float = 0.5
    radius: float = 7.0  # floor is a disk around the origin, so the horizon stays clean


@dataclass
class SyntheticScene:
    primitives: list
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    light_dir: tuple[float, float, float] = (0.3, 0.8, -0.5)  # toward the light, world frame
    ambient: float = 0.35

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")


def make_scene(seed: int = 0, n_primitives: int | None = None, shell_radius: float = 4.0,
               ground_height: float = -1.0) -> SyntheticScene:
    """Seeded primitives spread around a shell of ``shell_radius`` plus a checkered floor."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(6, 11)) if n_primitives is None else n_primitives
    prims: list = [GroundPlane(ground_height, (0.85, 0.8, 0.7), (0.25, 0.3, 0.35), 1.0)]
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(0, 2 * np.pi / n)
    for a in angles:
        rad = shell_radius + rng.uniform(-0.5, 0.5)
        center = np.array([rad * np.cos(a), rng.uniform(-0.6, 0.6), rad * np.sin(a)])
        albedo = tuple(float(x) for x in rng.uniform(0.15, 0.95, 3))
        if rng.random() < 0.5:
            prims.append(Sphere(tuple(center), float(rng.uniform(0.5, 0.9)), albedo))
        else:
            half = rng.uniform(0.35, 0.7, 3)
            lo = center - half
            lo[1] = max(lo[1], ground_height)
            prims.append(Box(tuple(lo), tuple(center + half), albedo))
    return SyntheticScene(prims)


def _hit(prim, o, d):
    """Distances and normals of first hits; ``inf`` where the ray misses."""
    n_rays = o.shape[0]
    t = np.full(n_rays, np.inf)
    nrm = np.zeros((n_rays, 3))
    if isinstance(prim, Sphere):
        oc = o - np.asarray(prim.center)
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - prim.radius**2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(ok, tt, np.inf)
        p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
        nrm = (p - np.asarray(prim.center)) / prim.radius
    elif isinstance(prim, Box):
        lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta, tb = (lo - o) * inv, (hi - o) * inv
        ta = np.where(np.isnan(ta), -np.inf, ta)
        tb = np.where(np.isnan(tb), np.inf, tb)
        tmin, tmax = np.minimum(ta, tb), np.maximum(ta, tb)
        t_near, t_far = tmin.max(1), tmax.min(1)
        ok = (t_far >= t_near) & (t_far > 1e-9)
        t = np.where(ok, np.where(t_near > 1e-9, t_near, t_far), np.inf)
        axis = np.where(t_near > 1e-9, tmin.argmax(1), tmax.argmin(1))
        sgn = -np.sign(d[np.arange(n_rays), axis])
        nrm[np.arange(n_rays), axis] = sgn
    elif isinstance(prim, GroundPlane):
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = (prim.height - o[:, 1]) / d[:, 1]
        ok = (np.abs(d[:, 1]) > 1e-12) & (tt > 1e-9)
        p = o + d * np.where(ok, tt, 0.0)[:, None]
        ok &= p[:, 0] ** 2 + p[:, 2] ** 2 <= prim.radius**2
        t = np.where(ok, tt, np.inf)
        nrm[:, 1] = np.where(o[:, 1] >= prim.height, 1.0, -1.0)
    return t, nrm


def _albedo(prim, p):
    a = np.broadcast_to(np.asarray(prim.albedo, dtype=np.float64), p.shape).copy()
    if isinstance(prim, GroundPlane):
        k = np.floor(p[:, 0] / prim.checker) + np.floor(p[:, 2] / prim.checker)
        odd = np.mod(k, 2) == 1
        a[odd] = prim.albedo2
    elif isinstance(prim, Box):
        # faint stripes give the boxes some texture
        a *= (0.8 + 0.2 * (np.mod(np.floor(4 * p.sum(1)), 2)))[:, None]
    return a


def trace(scene: SyntheticScene, origins: np.ndarray, dirs: np.ndarray):
    """First-hit tracing: returns (rgb, t) with ``t = inf`` on misses."""
    best = np.full(origins.shape[0], np.inf)
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), origins.shape).copy()
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for prim in scene.primitives:
        t, nrm = _hit(prim, origins, dirs)
        closer = t < best
        if not np.any(closer):
            continue
        best = np.where(closer, t, best)
        p = origins[closer] + dirs[closer] * t[closer, None]
        shade = scene.ambient + (1 - scene.ambient) * np.clip(nrm[closer] @ light, 0, None)
        rgb[closer] = _albedo(prim, p) * shade[:, None]
    return np.clip(rgb, 0, 1), best


def raytrace_gt(scene: SyntheticScene, pose: Pose, intr: CameraIntrinsics):
    """Ground-truth image (H, W, 3) and z-depth (H, W); depth is 0 where nothing is hit."""
    dirs_cam = intr.pixel_directions().reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    rgb, t = trace(scene, origins, dirs)
    depth = np.where(np.isfinite(t), t * dirs_cam[:, 2], 0.0)
    return rgb.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)


# ---------------------------------------------------------------------------
# trajectories and drift


def generate_trajectory(kind: str, n_keyframes: int, radius: float = 2.0, extent: float = 2.0,
                        height: float = 0.0, pitch_deg: float = 10.0, laps: float = 1.0) -> list[Pose]:
    """``loop``: circle of ``radius`` looking outward, covering ``laps`` turns (1 closes on the start).
    ``line``: straight segment of length ``extent`` along +x looking toward +z."""
    if n_keyframes < 2:
        raise ValueError("need at least two keyframes")
    poses = []
    drop = math.tan(math.radians(pitch_deg))
    if kind == "loop":
        for k in range(n_keyframes):
            a = 2 * math.pi * laps * k / (n_keyframes - 1)
            eye = np.array([radius * math.cos(a), height, radius * math.sin(a)])
            out = np.array([math.cos(a), -drop, math.sin(a)])
            poses.append(look_at(eye, eye + out))
    elif kind == "line":
        for k in range(n_keyframes):
            eye = np.array([-extent / 2 + extent * k / (n_keyframes - 1), height, 0.0])
            poses.append(look_at(eye, eye + np.array([0.0, -drop, 1.0])))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return poses


def inject_drift(poses: list[Pose], drift_rate: float, drift_rate_rot: float = 0.0,
                 bias: Iterable[float] = (1.0, 0.0, 0.0), axis: Iterable[float] = (0.0, 1.0, 0.0)) -> list[Pose]:
    """Accumulating drift: pose ``k`` (1-based) is offset by ``k * drift_rate`` along ``bias``
    and rotated by ``k * drift_rate_rot`` radians about ``axis``."""
    if drift_rate < 0 or drift_rate_rot < 0:
        raise ValueError("drift rates must be nonnegative")
    if drift_rate == 0 and drift_rate_rot == 0:
        return list(poses)
    b = np.asarray(tuple(bias), dtype=np.float64)
    b /= np.linalg.norm(b)
    ax = np.asarray(tuple(axis), dtype=np.float64)
    ax /= np.linalg.norm(ax)
    out = []
    for i, p in enumerate(poses):
        k = i + 1
        rot = Rotation.from_rotvec(ax * k * drift_rate_rot).as_matrix()
        out.append(Pose.from_rotation(rot @ p.rotation, p.translation + k * drift_rate * b))
    return out


# ---------------------------------------------------------------------------
# stream


@dataclass
class KeyframeData:
    id: int
    pose: Pose
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) z-depth, 0 = invalid
    intrinsics: CameraIntrinsics
    is_test: bool = False


@dataclass
class TrackerEvent:
    tag: str
    keyframe: KeyframeData | None = None
    covisible: set[int] = field(default_factory=set)
    updates: dict[int, Pose] = field(default_factory=dict)


def frustum_overlap(depth_a, pose_a: Pose, pose_b: Pose, intr: CameraIntrinsics, stride: int = 4) -> float:
    """Fraction of frame a's visible surface points that project inside frame b."""
    dirs = intr.pixel_directions()[::stride, ::stride].reshape(-1, 3)
    z = depth_a[::stride, ::stride].reshape(-1)
    valid = z > 0
    if not np.any(valid):
        return 0.0
    pts_cam = dirs[valid] * (z[valid] / dirs[valid, 2])[:, None]
    world = pose_a.apply(pts_cam)
    in_b = pose_b.inverse().apply(world)
    front = in_b[:, 2] > 1e-6
    u = intr.fx * in_b[:, 0] / np.where(front, in_b[:, 2], 1.0) + intr.cx
    v = intr.fy * in_b[:, 1] / np.where(front, in_b[:, 2], 1.0) + intr.cy
    inside = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return float(inside.mean())


def emit_stream(scene: SyntheticScene, gt_poses: list[Pose], drifted_poses: list[Pose],
                intr: CameraIntrinsics, loop_close_at: int | None = None, covis_radius: float = 0.0,
                covis_threshold: float = 0.3, test_every: int = 10) -> list[TrackerEvent]:
    """Keyframe events with GT images stamped with drifted poses, then an idealized loop closure.

    Every ``test_every``-th keyframe is flagged as held out.  At
    ``loop_close_at`` a POSE_UPDATE snaps every earlier keyframe to its GT
    pose; keyframes from then on are stamped with GT poses.
    """
    n = len(gt_poses)
    if len(drifted_poses) != n:
        raise StreamError("GT and drifted trajectories differ in length")
    if loop_close_at is not None and not (0 < loop_close_at < n):
        raise StreamError(f"loop_close_at={loop_close_at} outside (0, {n})")
    renders = [raytrace_gt(scene, p, intr) for p in gt_poses]
    events: list[TrackerEvent] = []
    for k in range(n):
        if loop_close_at is not None and k == loop_close_at:
            events.append(TrackerEvent(POSE_UPDATE, updates={j: gt_poses[j] for j in range(k)}))
        closed = loop_close_at is not None and k >= loop_close_at
        stamped = gt_poses[k] if closed else drifted_poses[k]
        covis = set()
        for j in range(k):
            near = np.linalg.norm(gt_poses[j].translation - gt_poses[k].translation) <= covis_radius
            if near:
                covis.add(j)
                continue
            ov = 0.5 * (frustum_overlap(renders[k][1], gt_poses[k], gt_poses[j], intr)
                        + frustum_overlap(renders[j][1], gt_poses[j], gt_poses[k], intr))
            if ov > covis_threshold:
                covis.add(j)
        is_test = test_every > 0 and k % test_every == test_every - 1
        img, dep = renders[k]
        events.append(TrackerEvent(KEYFRAME, KeyframeData(k, stamped, img, dep, intr, is_test), covis))
    events.append(TrackerEvent(END))
    return events


# ---------------------------------------------------------------------------
# serialization


def save_image(path: Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def load_image(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_depth(path: Path, depth: np.ndarray) -> None:
    mm = np.clip(np.round(depth * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def write_stream(events: list[TrackerEvent], directory: str | Path, name: str = "stream.jsonl") -> Path:
    """Write the JSON-lines stream with images/ and depth/ next to it."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    path = root / name
    with open(path, "w") as f:
        for ev in events:
            if ev.tag == KEYFRAME:
                kf = ev.keyframe
                img_rel = f"images/{kf.id:05d}.png"
                dep_rel = f"depth/{kf.id:05d}.png"
                save_image(root / img_rel, kf.image)
                save_depth(root / dep_rel, kf.depth)
                i = kf.intrinsics
                rec = {
                    "type": KEYFRAME,
                    "id": kf.id,
                    "pose": kf.pose.to_list(),
                    "image_path": img_rel,
                    "depth_path": dep_rel,
                    "covisible": sorted(ev.covisible),
                    "test": kf.is_test,
                    "intrinsics": [i.fx, i.fy, i.cx, i.cy, i.width, i.height],
                }
            elif ev.tag == POSE_UPDATE:
                rec = {"type": POSE_UPDATE, "updates": {str(k): p.to_list() for k, p in sorted(ev.updates.items())}}
            elif ev.tag == END:
                rec = {"type": END}
            else:
                raise StreamError(f"unknown event tag {ev.tag!r}")
            f.write(json.dumps(rec) + "\n")
    return path


def read_stream(path: str | Path) -> list[TrackerEvent]:
    """Parse a JSON-lines stream; image paths resolve relative to the stream file."""
    path = Path(path)
    events: list[TrackerEvent] = []
    seen: set[int] = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tag = rec["type"]
                if tag == KEYFRAME:
                    fx, fy, cx, cy, w, h = rec["intrinsics"]
                    intr = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
                    image = load_image(path.parent / rec["image_path"])
                    dp = rec.get("depth_path")
                    depth = load_depth(path.parent / dp) if dp else np.zeros(image.shape[:2])
                    kid = int(rec["id"])
                    covis = {int(c) for c in rec.get("covisible", [])}
                    if kid in seen or not covis <= seen:
                        raise StreamError("keyframe id reused or covisible id unknown")
                    seen.add(kid)
                    kf = KeyframeData(kid, Pose.from_list(rec["pose"]), image, depth, intr, bool(rec.get("test", False)))
                    events.append(TrackerEvent(KEYFRAME, kf, covis))
                elif tag == POSE_UPDATE:
                    ups = {int(k): Pose.from_list(v) for k, v in rec["updates"].items()}
                    if not set(ups) <= seen:
                        raise StreamError("pose update references unknown keyframe")
                    events.append(TrackerEvent(POSE_UPDATE, updates=ups))
                elif tag == END:
                    events.append(TrackerEvent(END))
                    break
                else:
                    raise StreamError(f"unknown event type {tag!r}")
            except (KeyError, TypeError, ValueError, GeometryError, OSError) as exc:
                raise StreamError(f"{path}:{lineno}: {exc}") from exc
    if not events or events[-1].tag != END:
        raise StreamError(f"{path}: stream does not end with END")
    return events


def generate(out_dir: str | Path, *, seed: int = 0, n_keyframes: int = 40, kind: str = "loop",
             radius: float = 2.0, drift_rate: float = 0.02, drift_rate_rot: float = 0.01,
             loop_close_at: int | None = -1, covis_radius: float = 0.0, width: int = 64, height: int = 64,
             fov_deg: float = 70.0, test_every: int = 10, laps: float = 1.0) -> Path:
    """Build scene, trajectory, drift and stream in one call and write it to ``out_dir``.

    ``loop_close_at=-1`` closes the loop at the last keyframe; ``None`` disables it.
    """
    scene = make_scene(seed)
    intr = CameraIntrinsics.from_fov(width, height, fov_deg)
    gt = generate_trajectory(kind, n_keyframes, radius=radius, laps=laps)
    drifted = inject_drift(gt, drift_rate, drift_rate_rot)
    lc = n_keyframes - 1 if loop_close_at == -1 else loop_close_at
    events = emit_stream(scene, gt, drifted, intr, lc, covis_radius, test_every=test_every)
    path = write_stream(events, out_dir)
    meta = {
        "seed": seed, "n_keyframes": n_keyframes, "kind": kind, "radius": radius, "drift_rate": drift_rate,
        "drift_rate_rot": drift_rate_rot, "loop_close_at": lc, "laps": laps, "covis_radius": covis_radius,
        "gt_poses": [p.to_list() for p in gt],
    }
    (Path(out_dir) / "meta.json").write_text(json.dumps(meta, indent=1))
    return path
