"""Synthetic analytic scenes: spheres, planes and axis-aligned boxes with
procedural textures, Lambertian shading under one directional light, traced
exactly (closest hit) so every image comes with an exact depth map.

Scene documents are JSON::

    {"primitives": [{"type": "sphere", "center": [..], "radius": r, "texture": {...}}, ...],
     "cameras": [{"eye": [..], "target": [..], "focal": f, "size": [h, w],
                  "near": n, "far": f, "role": "source" | "train" | "test"}, ...],
     "light": {"direction": [..], "ambient": a},
     "background": [r, g, b],
     "seed": 0}

A camera may instead be given in the full serialized form (``intrinsics``,
``world_to_camera``, ``size``, ``near``, ``far``).  Textures are
``{"type": "solid", "color": c}``, ``{"type": "checker", "colors": [c1, c2],
"scale": s}`` or ``{"type": "gradient", "colors": [c1, c2], "axis": k,
"range": [lo, hi]}``.  Depth maps hold distance along the ray; misses are inf.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..geometry import Camera, GeometryError, generate_rays, look_at, pixel_centers

EPS = 1e-9
ROLES = ("source", "train", "test")


class SceneSpecError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = []
        if path:
            where.append(path)
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.path = path


# ---------------------------------------------------------------------------
# Textures


@dataclass(frozen=True)
class Texture:
    kind: str
    colors: tuple[tuple[float, float, float], ...]
    scale: float = 1.0
    axis: int = 0
    span: tuple[float, float] = (0.0, 1.0)

    def __call__(self, p: np.ndarray) -> np.ndarray:
        c = np.asarray(self.colors, dtype=np.float64)
        if self.kind == "solid":
            return np.broadcast_to(c[0], p.shape).copy()
        if self.kind == "checker":
            cells = np.floor(p / self.scale + EPS).astype(np.int64).sum(-1)
            return np.where((cells % 2 == 0)[:, None], c[0], c[1])
        lo, hi = self.span
        t = np.clip((p[:, self.axis] - lo) / (hi - lo), 0.0, 1.0)[:, None]
        return (1 - t) * c[0] + t * c[1]


def _vec(d: dict, key: str, path: str, n: int = 3) -> np.ndarray:
    if key not in d:
        raise SceneSpecError(f"missing {key!r}", path=path)
    try:
        v = np.asarray(d[key], dtype=np.float64).reshape(-1)
    except (TypeError, ValueError):
        raise SceneSpecError(f"{key!r} must be numeric", path=path) from None
    if v.shape != (n,):
        raise SceneSpecError(f"{key!r} must have {n} components", path=path)
    return v


def _num(d: dict, key: str, path: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise SceneSpecError(f"missing {key!r}", path=path)
        return default
    try:
        return float(d[key])
    except (TypeError, ValueError):
        raise SceneSpecError(f"{key!r} must be a number", path=path) from None


def parse_texture(d: dict | None, path: str) -> Texture:
    if d is None:
        return Texture("solid", ((0.7, 0.7, 0.7),))
    kind = d.get("type", "solid")
    if kind == "solid":
        return Texture("solid", (tuple(_vec(d, "color", path)),))
    if kind not in ("checker", "gradient"):
        raise SceneSpecError(f"unknown texture type {kind!r}", path=path)
    cols = d.get("colors")
    if not isinstance(cols, list) or len(cols) != 2:
        raise SceneSpecError("texture needs two 'colors'", path=path)
    colors = tuple(tuple(_vec({"c": c}, "c", path)) for c in cols)
    if kind == "checker":
        scale = _num(d, "scale", path, 1.0)
        if scale <= 0:
            raise SceneSpecError("checker scale must be positive", path=path)
        return Texture("checker", colors, scale=scale)
    span = tuple(d.get("range", (0.0, 1.0)))
    if len(span) != 2 or span[0] == span[1]:
        raise SceneSpecError("gradient range must be two distinct numbers", path=path)
    return Texture("gradient", colors, axis=int(d.get("axis", 0)), span=(float(span[0]), float(span[1])))


# ---------------------------------------------------------------------------
# Primitives: intersect(o, d) -> (t, normal) with t = inf on a miss


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture

    def intersect(self, o, d):
        oc = o - self.center
        b = (oc * d).sum(-1)
        c = (oc * oc).sum(-1) - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > EPS, t0, np.where(t1 > EPS, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        return t, (p - self.center) / self.radius


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    texture: Texture

    def intersect(self, o, d):
        n = self.normal / np.linalg.norm(self.normal)
        denom = d @ n
        ok = np.abs(denom) > EPS
        t = np.where(ok, ((self.point - o) @ n) / np.where(ok, denom, 1.0), np.inf)
        t = np.where(t > EPS, t, np.inf)
        return t, np.broadcast_to(n, o.shape)


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    texture: Texture

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (self.lo - o) * inv
            tb = (self.hi - o) * inv
        tmin = np.nan_to_num(np.minimum(ta, tb), nan=-np.inf)
        tmax = np.nan_to_num(np.maximum(ta, tb), nan=np.inf)
        t_near = tmin.max(-1)
        t_far = tmax.min(-1)
        hit = (t_far >= t_near) & (t_far > EPS)
        t = np.where(t_near > EPS, t_near, t_far)
        t = np.where(hit, t, np.inf)
        axis = np.where(t_near > EPS, tmin.argmax(-1), tmax.argmin(-1))
        normal = np.zeros_like(o)
        normal[np.arange(len(o)), axis] = -np.sign(d[np.arange(len(o)), axis])
        return t, normal


def parse_primitive(d: dict, path: str):
    if not isinstance(d, dict):
        raise SceneSpecError("primitive must be an object", path=path)
    kind = d.get("type")
    tex = parse_texture(d.get("texture"), path + ".texture")
    if kind == "sphere":
        r = _num(d, "radius", path)
        if r <= 0:
            raise SceneSpecError("sphere radius must be positive", path=path)
        return Sphere(_vec(d, "center", path), r, tex)
    if kind == "plane":
        n = _vec(d, "normal", path)
        if np.linalg.norm(n) == 0:
            raise SceneSpecError("plane normal must be non-zero", path=path)
        return Plane(_vec(d, "point", path), n, tex)
    if kind == "box":
        lo, hi = _vec(d, "min", path), _vec(d, "max", path)
        if np.any(lo >= hi):
            raise SceneSpecError("box min must be below max on every axis", path=path)
        return Box(lo, hi, tex)
    raise SceneSpecError(f"unknown primitive type {kind!r}", path=path)


def parse_camera(d: dict, path: str) -> tuple[Camera, str]:
    if not isinstance(d, dict):
        raise SceneSpecError("camera must be an object", path=path)
    role = d.get("role", "train")
    if role not in ROLES:
        raise SceneSpecError(f"camera role must be one of {ROLES}", path=path)
    try:
        if "intrinsics" in d:
            return Camera.from_dict(d), role
        size = d.get("size")
        if not isinstance(size, list) or len(size) != 2:
            raise SceneSpecError("camera needs 'size': [h, w]", path=path)
        return look_at(_vec(d, "eye", path), _vec(d, "target", path),
                       d.get("up", (0.0, -1.0, 0.0)), focal=_num(d, "focal", path),
                       image_size=(int(size[0]), int(size[1])),
                       near=_num(d, "near", path), far=_num(d, "far", path)), role
    except GeometryError as exc:
        raise SceneSpecError(str(exc), path=path) from None


# ---------------------------------------------------------------------------
# Scenes


@dataclass
class SyntheticScene:
    primitives: list
    cameras: list[Camera]
    roles: list[str]
    light_direction: np.ndarray
    ambient: float
    background: np.ndarray
    seed: int = 0
    images: list[np.ndarray] = field(default_factory=list)
    depths: list[np.ndarray] = field(default_factory=list)
    spec: dict = field(default_factory=dict)

    def indices(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    @property
    def source_indices(self) -> list[int]:
        return self.indices("source")

    @property
    def train_indices(self) -> list[int]:
        return self.indices("train")

    @property
    def test_indices(self) -> list[int]:
        return self.indices("test")

    def trace(self, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Closest hit per ray: (color, distance, primitive index or -1)."""
        B = len(origins)
        best = np.full(B, np.inf)
        which = np.full(B, -1)
        normals = np.zeros((B, 3))
        for k, prim in enumerate(self.primitives):
            t, n = prim.intersect(origins, directions)
            closer = t < best
            best = np.where(closer, t, best)
            which = np.where(closer, k, which)
            normals[closer] = n[closer]
        color = np.broadcast_to(self.background, (B, 3)).copy()
        hit = which >= 0
        if hit.any():
            p = origins[hit] + best[hit, None] * directions[hit]
            n = normals[hit]
            n = np.where(((n * directions[hit]).sum(-1) > 0)[:, None], -n, n)
            to_light = -self.light_direction / np.linalg.norm(self.light_direction)
            shade = self.ambient + (1 - self.ambient) * np.maximum(n @ to_light, 0.0)
            albedo = np.zeros((hit.sum(), 3))
            for k, prim in enumerate(self.primitives):
                sel = which[hit] == k
                if sel.any():
                    albedo[sel] = prim.texture(p[sel])
            color[hit] = albedo * shade[:, None]
        return color, best, which

    def render_view(self, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
        h, w = camera.image_size
        rays = generate_rays(camera, pixel_centers(camera))
        color, t, _ = self.trace(rays.origins, rays.directions)
        return color.reshape(h, w, 3), t.reshape(h, w)

    def render_all(self) -> None:
        self.images, self.depths = [], []
        for i, cam in enumerate(self.cameras):
            img, depth = self.render_view(cam)
            if not np.isfinite(depth).any():
                raise SceneSpecError(f"camera {i} sees no primitive", path=f"cameras[{i}]")
            self.images.append(img)
            self.depths.append(depth)


def parse_scene(doc: dict) -> SyntheticScene:
    if not isinstance(doc, dict):
        raise SceneSpecError("scene document must be a JSON object")
    prims = doc.get("primitives")
    if not isinstance(prims, list) or not prims:
        raise SceneSpecError("scene needs a non-empty 'primitives' list", path="primitives")
    cams = doc.get("cameras")
    if not isinstance(cams, list) or not cams:
        raise SceneSpecError("scene needs a non-empty 'cameras' list", path="cameras")
    primitives = [parse_primitive(p, f"primitives[{i}]") for i, p in enumerate(prims)]
    parsed = [parse_camera(c, f"cameras[{i}]") for i, c in enumerate(cams)]
    light = doc.get("light", {})
    direction = _vec(light, "direction", "light") if "direction" in light else np.array([0.0, 0.0, 1.0])
    ambient = _num(light, "ambient", "light", 0.3)
    background = _vec(doc, "background", "background") if "background" in doc else np.zeros(3)
    return SyntheticScene(primitives, [c for c, _ in parsed], [r for _, r in parsed], direction, ambient,
                          background, int(doc.get("seed", 0)), spec=doc)


def make_scene(spec) -> SyntheticScene:
    """Build and render a scene from a path, JSON text or an already-parsed dict."""
    if isinstance(spec, dict):
        doc = spec
    else:
        text = Path(spec).read_text() if isinstance(spec, Path) or (
            isinstance(spec, str) and not spec.lstrip().startswith("{")) else spec
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SceneSpecError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    scene = parse_scene(doc)
    scene.render_all()
    return scene


def bundled_scene_path(name: str = "plane_sphere.json") -> Path:
    return Path(str(resources.files("golfnrt") / "data" / name))


def resized_spec(doc: dict, size: int) -> dict:
    """Copy of a look-at scene document with every camera at ``size x size``
    and focal length scaled to keep the field of view."""
    out = json.loads(json.dumps(doc))
    for cam in out["cameras"]:
        if "intrinsics" in cam:
            raise SceneSpecError("resizing needs look-at cameras")
        cam["focal"] = cam["focal"] * size / cam["size"][1]
        cam["size"] = [size, size]
    return out


def bundled_scene(size: int | None = None) -> SyntheticScene:
    doc = json.loads(bundled_scene_path().read_text())
    return make_scene(resized_spec(doc, size) if size else doc)
