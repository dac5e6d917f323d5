"""Pinhole cameras, ray casting, projection and depth sampling.

Conventions: ``world_to_camera`` maps world points into a camera frame with
x to the right, y down and the camera looking along +z.  Pixel coordinates
are continuous ``(row, col)`` pairs with the origin at the top-left image
corner; the integer pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)`` so its
center is ``(i + 0.5, j + 0.5)``.  Depth along a ray is metric distance along
the unit direction; ``project`` reports camera-space z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-6
BORDER_TOL = 1e-9  # pixels; absorbs rounding for points built exactly on the border


class GeometryError(ValueError):
    """Rejected camera or ray input."""


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: np.ndarray
    world_to_camera: np.ndarray
    image_size: tuple[int, int]
    near: float
    far: float

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "world_to_camera", T)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise GeometryError("intrinsics must be upper triangular with K[2,2] = 1")
        R = T[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or not np.allclose(T[3], [0, 0, 0, 1]):
            raise GeometryError("world_to_camera must be a rigid transform")
        if not 0 < self.near < self.far:
            raise GeometryError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if min(self.image_size) <= 0:
            raise GeometryError(f"bad image size {self.image_size}")

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def center(self) -> np.ndarray:
        R, t = self.rotation, self.world_to_camera[:3, 3]
        return -R.T @ t

    @property
    def optical_axis(self) -> np.ndarray:
        """World-space viewing direction (+z of the camera frame)."""
        return self.rotation[2].copy()

    def camera_to_world(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.T
        out[:3, 3] = self.center
        return out

    def scaled(self, factor: float) -> "Camera":
        """Same pose, image resolution multiplied by ``factor``."""
        K = self.intrinsics.copy()
        K[:2] *= factor
        h, w = self.image_size
        return Camera(K, self.world_to_camera, (round(h * factor), round(w * factor)), self.near, self.far)

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.reshape(-1).tolist(),
            "world_to_camera": self.world_to_camera.reshape(-1).tolist(),
            "size": list(self.image_size),
            "near": float(self.near),
            "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(
                np.asarray(d["intrinsics"], dtype=np.float64).reshape(3, 3),
                np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
                tuple(d["size"]),
                float(d["near"]),
                float(d["far"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GeometryError):
                raise
            raise GeometryError(f"malformed camera document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Camera":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def intrinsics_matrix(focal: float, image_size: tuple[int, int],
                      principal: tuple[float, float] | None = None) -> np.ndarray:
    h, w = image_size
    cy, cx = principal if principal is not None else (h / 2.0, w / 2.0)
    return np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, -1.0, 0.0), *,
            focal: float, image_size: tuple[int, int], near: float, far: float) -> Camera:
    """Camera at ``eye`` looking at ``target``.  ``up`` is the world direction
    that should appear towards the top of the image (camera -y)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-12:
        raise GeometryError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return Camera(intrinsics_matrix(focal, image_size), T, image_size, near, far)


@dataclass(frozen=True, eq=False)
class RayBundle:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        n = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (len(o),)).copy()
        f = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (len(o),)).copy()
        if o.shape != d.shape:
            raise GeometryError("origins and directions disagree in length")
        if len(d) and np.abs(np.linalg.norm(d, axis=1) - 1).max() > 1e-6:
            raise GeometryError("ray directions must be unit length")
        if np.any(n >= f):
            raise GeometryError("every ray needs near < far")
        for name, val in (("origins", o), ("directions", d), ("near", n), ("far", f)):
            object.__setattr__(self, name, val)

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, idx) -> "RayBundle":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return RayBundle(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    @staticmethod
    def concatenate(bundles: Sequence["RayBundle"]) -> "RayBundle":
        return RayBundle(
            np.concatenate([b.origins for b in bundles]),
            np.concatenate([b.directions for b in bundles]),
            np.concatenate([b.near for b in bundles]),
            np.concatenate([b.far for b in bundles]),
        )


@dataclass(frozen=True, eq=False)
class SamplePoints:
    """Depths ``B x S`` along each ray and the matching world positions.

    ``valid`` marks real samples; padded slots (used when rays in a batch end
    up with different sample counts) sit at the end of each row with
    ``valid=False`` and repeat the last real depth.
    """

    depths: np.ndarray
    positions: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid is None:
            object.__setattr__(self, "valid", np.ones(self.depths.shape, dtype=bool))

    @property
    def count(self) -> int:
        return self.depths.shape[1]

    @classmethod
    def along(cls, rays: RayBundle, depths: np.ndarray, valid: np.ndarray | None = None) -> "SamplePoints":
        depths = np.asarray(depths, dtype=np.float64)
        positions = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
        return cls(depths, positions, valid)


def generate_rays(camera: Camera, pixel_coords) -> RayBundle:
    """Rays from the camera center through continuous pixel positions ``(row, col)``."""
    px = np.asarray(pixel_coords, dtype=np.float64).reshape(-1, 2)
    h, w = camera.image_size
    if np.any(px < 0) or np.any(px[:, 0] > h) or np.any(px[:, 1] > w):
        raise GeometryError(f"pixel coordinates outside the {h}x{w} image")
    homog = np.stack([px[:, 1], px[:, 0], np.ones(len(px))], axis=1)
    cam_dirs = np.linalg.solve(camera.intrinsics, homog.T).T
    dirs = cam_dirs @ camera.rotation  # R^T applied to each row
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape)
    return RayBundle(origins, dirs, camera.near, camera.far)


def pixel_centers(camera: Camera) -> np.ndarray:
    """``(H*W) x 2`` pixel-center coordinates in row-major order."""
    h, w = camera.image_size
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def project(camera: Camera, world_points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Perspective projection.  Returns ``(pixels (row, col), depth z, in_frustum)``.

    Points with non-positive camera depth get NaN-free placeholder pixels and
    are reported outside the frustum.  Image borders count as inside.
    """
    pts = np.asarray(world_points, dtype=np.float64)
    lead = pts.shape[:-1]
    pts = pts.reshape(-1, 3)
    cam = pts @ camera.rotation.T + camera.world_to_camera[:3, 3]
    z = cam[:, 2]
    safe = z > 1e-12
    z_div = np.where(safe, z, 1.0)
    uvw = cam @ camera.intrinsics.T
    col = np.where(safe, uvw[:, 0] / z_div, -1.0)
    row = np.where(safe, uvw[:, 1] / z_div, -1.0)
    h, w = camera.image_size
    eps = BORDER_TOL
    inside = (safe & (z > camera.near) & (z < camera.far)
              & (row >= -eps) & (row <= h + eps) & (col >= -eps) & (col <= w + eps))
    pixels = np.stack([row, col], axis=1)
    return pixels.reshape(*lead, 2), z.reshape(lead), inside.reshape(lead)


def unproject(camera: Camera, pixels, depths) -> np.ndarray:
    """Inverse of :func:`project`: world points at camera-space depth ``depths``."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depths, dtype=np.float64).reshape(-1)
    homog = np.stack([px[:, 1], px[:, 0], np.ones(len(px))], axis=1)
    cam = np.linalg.solve(camera.intrinsics, homog.T).T * z[:, None]
    world = (cam - camera.world_to_camera[:3, 3]) @ camera.rotation
    return world


def sample_uniform(rays: RayBundle, count: int, jitter: bool = False,
                   rng: np.random.Generator | Sequence[np.random.Generator] | None = None) -> SamplePoints:
    """Stratified depths: one per equal-width bin of ``[near, far]``; bin
    midpoints without jitter, a uniform draw inside each bin with it.

    ``rng`` may be a list with one generator per ray, so that a ray's jitter
    does not depend on which other rays share the batch.
    """
    if count < 2:
        raise GeometryError("need at least 2 samples per ray")
    if jitter:
        if isinstance(rng, (list, tuple)):
            offsets = np.stack([g.random(count) for g in rng]) if rng else np.zeros((0, count))
        else:
            rng = rng if rng is not None else np.random.default_rng()
            offsets = rng.random((len(rays), count))
    else:
        offsets = np.full((len(rays), count), 0.5)
    t = (np.arange(count)[None, :] + offsets) / count
    depths = rays.near[:, None] + t * (rays.far - rays.near)[:, None]
    return SamplePoints.along(rays, depths)
