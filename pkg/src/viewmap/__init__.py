"""View-centric neural-field mapping: many small radiance fields, each anchored to a keyframe."""

from .atlas import Atlas, Keyframe
from .config import AtlasConfig, FieldConfig, RenderConfig, RunConfig
from .geom import CameraIntrinsics, Pose

__all__ = ["Atlas", "AtlasConfig", "CameraIntrinsics", "FieldConfig", "Keyframe", "Pose", "RenderConfig", "RunConfig"]
