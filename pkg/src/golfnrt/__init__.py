"""Generalizable neural rendering transformer at desk scale."""

from .geometry import Camera, RayBundle, SamplePoints, generate_rays, look_at, project, unproject
from .pipeline import GolfNRT, ModelConfig, prepare_scene, render_image, render_rays

__version__ = "0.1.0"

__all__ = [
    "Camera", "RayBundle", "SamplePoints", "generate_rays", "look_at", "project", "unproject",
    "GolfNRT", "ModelConfig", "prepare_scene", "render_image", "render_rays",
]
