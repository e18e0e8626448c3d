"""Rigid-body poses, pinhole rays and the spherical inverse-distance contraction.

Local camera convention: +z forward, +x right, +y down.  Poses are
camera-to-world.  Contracted coordinates are ``(theta, phi, rho)`` in
``[0, 1]^3``: normalized azimuth ``atan2(z, x)``, normalized elevation
``asin(y / r)`` and inverse distance ``1 / (1 + r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy.spatial.transform import Rotation

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Raised on inputs outside an operation's domain."""


# ---------------------------------------------------------------------------
# Pose


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Hamilton product, (x, y, z, w) storage
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform (camera-to-world) stored as unit quaternion + translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)) or n == 0.0:
            raise GeometryError("pose must be finite with a nonzero quaternion")
        q = q / n
        # canonical sign keeps serialization stable
        if q[3] < 0:
            q = -q
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        m = np.asarray(m, dtype=np.float64)
        return cls(Rotation.from_matrix(m[:3, :3]).as_quat(), m[:3, 3])

    @classmethod
    def from_rotation(cls, rot: np.ndarray, translation: Sequence[float]) -> Pose:
        return cls(Rotation.from_matrix(np.asarray(rot, dtype=np.float64)).as_quat(), translation)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> Pose:
        """Parse ``[tx, ty, tz, qx, qy, qz, qw]``."""
        v = [float(x) for x in values]
        if len(v) != 7:
            raise GeometryError(f"pose list needs 7 numbers, got {len(v)}")
        return cls(v[3:], v[:3])

    def to_list(self) -> list[float]:
        return [float(x) for x in self.translation] + [float(x) for x in self.quat]

    @property
    def rotation(self) -> np.ndarray:
        return _quat_to_matrix(self.quat)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        return Pose(
            _quat_mul(self.quat, other.quat),
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> Pose:
        qi = self.quat * np.array([-1.0, -1.0, -1.0, 1.0])
        return Pose(qi, -(_quat_to_matrix(qi) @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.quat, other.quat) and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.quat.tobytes(), self.translation.tobytes()))


def pose_distance(a: Pose, b: Pose) -> float:
    """Euclidean distance between the two camera centers."""
    return float(np.linalg.norm(a.translation - b.translation))


# ---------------------------------------------------------------------------
# Cameras and rays


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> CameraIntrinsics:
        f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def pixel_directions(self) -> np.ndarray:
        """Unit camera-frame directions through every pixel center, shape (H, W, 3)."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], -1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


def pixel_to_ray(kf_pose: Pose, intr: CameraIntrinsics, u: float, v: float, model_anchor: Pose) -> Ray:
    """Ray through image point ``(u, v)`` expressed in ``model_anchor``'s local frame.

    ``(u, v)`` are continuous image coordinates; the center of pixel ``(i, j)``
    is ``(i + 0.5, j + 0.5)``.
    """
    if not (0 <= u <= intr.width and 0 <= v <= intr.height):
        raise GeometryError(f"pixel ({u}, {v}) outside the image")
    d = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d /= np.linalg.norm(d)
    rel = model_anchor.inverse().compose(kf_pose)
    direction = rel.rotation @ d
    return Ray(rel.translation.copy(), direction / np.linalg.norm(direction))


def rays_in_frame(kf_pose: Pose, dirs_cam: np.ndarray, model_anchor: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``pixel_to_ray`` for precomputed camera-frame unit directions ``(..., 3)``."""
    rel = model_anchor.inverse().compose(kf_pose)
    d = dirs_cam @ rel.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(rel.translation, d.shape).copy()
    return o, d


# ---------------------------------------------------------------------------
# Spherical contraction


class ContractedPoint(NamedTuple):
    theta: float
    phi: float
    rho: float


def to_contracted(p: Sequence[float]) -> ContractedPoint:
    """Map a local Cartesian point to ``(theta, phi, rho)``."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    if not np.all(np.isfinite(p)):
        raise GeometryError("point must be finite")
    c = contract(p)[0]
    return ContractedPoint(float(c[0]), float(c[1]), float(c[2]))


def from_contracted(c: Sequence[float]) -> np.ndarray:
    """Exact inverse of ``to_contracted`` away from the origin and poles."""
    c = np.asarray(tuple(c), dtype=np.float64).reshape(1, 3)
    if not np.all((c >= 0) & (c <= 1)):
        raise GeometryError("contracted point outside [0, 1]^3")
    if c[0, 2] <= 0:
        raise GeometryError("rho = 0 is the point at infinity")
    return uncontract(c)[0]


def contract(p):
    """Batched contraction; accepts numpy arrays or torch tensors of shape (..., 3)."""
    if isinstance(p, torch.Tensor):
        x, y, z = p.unbind(-1)
        h = torch.hypot(x, z)
        r = torch.hypot(h, y)
        az = torch.atan2(z, x)
        theta = torch.where(h > 0, (az + math.pi) / TWO_PI, torch.full_like(az, 0.5))
        phi = (torch.atan2(y, h) + math.pi / 2) / math.pi
        return torch.stack([theta.clamp(0, 1), phi.clamp(0, 1), 1.0 / (1.0 + r)], -1)
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    h = np.hypot(x, z)
    r = np.hypot(h, y)
    theta = np.where(h > 0, (np.arctan2(z, x) + math.pi) / TWO_PI, 0.5)
    phi = (np.arctan2(y, h) + math.pi / 2) / math.pi
    return np.stack([np.clip(theta, 0, 1), np.clip(phi, 0, 1), 1.0 / (1.0 + r)], -1)


def _unit_from_angles(theta, phi):
    az = theta * TWO_PI - math.pi
    el = phi * math.pi - math.pi / 2
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), np.sin(el), ce * np.sin(az)], -1)


def uncontract(c: np.ndarray) -> np.ndarray:
    """Batched inverse contraction; ``rho`` must be positive."""
    c = np.asarray(c, dtype=np.float64)
    r = (1.0 - c[..., 2]) / c[..., 2]
    return _unit_from_angles(c[..., 0], c[..., 1]) * r[..., None]


def transform_contracted(c: np.ndarray, pose: Pose) -> np.ndarray:
    """Re-express contracted points of one frame in another frame.

    ``pose`` maps source-frame Cartesian points to destination-frame points.
    Points at infinity (``rho = 0``) keep ``rho = 0`` and only rotate.  When
    the mapped point lands on a singularity (origin or pole axis) the
    azimuth/elevation are taken from the rotated input angles instead of the
    fixed 0.5 convention, so the identity transform is exact everywhere.
    """
    c = np.asarray(c, dtype=np.float64).reshape(-1, 3)
    R = pose.rotation
    rho = c[:, 2]
    finite = rho > 0
    r_in = np.where(finite, (1.0 - rho) / np.where(finite, rho, 1.0), 0.0)
    u_in = _unit_from_angles(c[:, 0], c[:, 1])
    u_rot = u_in @ R.T
    p = np.where(finite[:, None], u_rot * r_in[:, None] + pose.translation, u_rot)
    out = contract(p)
    out[~finite, 2] = 0.0

    # azimuth reference direction, used when the output sits on the pole axis
    az = c[:, 0] * TWO_PI - math.pi
    e_az = np.stack([np.cos(az), np.zeros_like(az), np.sin(az)], -1) @ R.T
    theta_ref = (np.arctan2(e_az[:, 2], e_az[:, 0]) + math.pi) / TWO_PI

    r_out = np.linalg.norm(p, axis=-1)
    scale = np.maximum(1.0, r_in)
    at_origin = finite & (r_out <= 1e-12 * scale)
    if np.any(at_origin):
        ang = contract(u_rot[at_origin])
        out[at_origin, 0] = ang[:, 0]
        out[at_origin, 1] = ang[:, 1]
        out[at_origin, 2] = 1.0
    h_out = np.hypot(p[:, 0], p[:, 2])
    on_pole = (h_out <= 1e-12 * np.maximum(r_out, 1e-300)) | (at_origin & (np.abs(u_rot[:, 1]) >= 1 - 1e-15))
    out[on_pole, 0] = theta_ref[on_pole]
    return np.clip(out, 0.0, 1.0)


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` (+y down in camera frame)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise GeometryError("look direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose.from_rotation(np.stack([right, down, fwd], axis=1), eye)
