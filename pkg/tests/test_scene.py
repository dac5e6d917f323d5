import json

import numpy as np
import pytest

from golfnrt.geometry import generate_rays, look_at, pixel_centers
from golfnrt.harness.scene import (Box, Plane, SceneSpecError, Sphere, Texture, bundled_scene, make_scene,
                                   parse_texture)


def camera_doc(**kw):
    doc = {"eye": [0, 0, 0], "target": [0, 0, 1], "focal": 20, "size": [24, 24], "near": 0.5, "far": 20}
    doc.update(kw)
    return doc


def scene_doc(primitives, cameras=None, **kw):
    doc = {"primitives": primitives, "cameras": [camera_doc()] if cameras is None else cameras, "light": {"direction": [0, 0, 1]}}
    doc.update(kw)
    return doc


PLANE2 = {"type": "plane", "point": [0, 0, 2], "normal": [0, 0, -1], "texture": {"type": "solid", "color": [1, 1, 1]}}


def test_plane_depth_follows_view_angle():
    scene = make_scene(scene_doc([PLANE2]))
    cam = scene.cameras[0]
    rays = generate_rays(cam, pixel_centers(cam))
    cos = rays.directions[:, 2]
    assert np.abs(scene.depths[0].reshape(-1) - 2 / cos).max() < 1e-12


def test_sphere_silhouette_radius():
    z, r, f = 5.0, 1.0, 20.0
    doc = scene_doc([{"type": "sphere", "center": [0, 0, 0], "radius": r}],
                    [camera_doc(eye=[0, 0, z], target=[0, 0, 0], size=[32, 32], focal=f, near=1, far=10)])
    scene = make_scene(doc)
    hit = np.isfinite(scene.depths[0])
    radius = f * r / np.sqrt(z * z - r * r)
    rows, cols = np.mgrid[0:32, 0:32] + 0.5
    dist = np.hypot(rows - 16, cols - 16)
    assert hit[dist < radius - 0.75].all()
    assert not hit[dist > radius + 0.75].any()
    # area of the rendered mask agrees with the analytic disc
    assert abs(hit.sum() - np.pi * radius ** 2) < 2 * np.pi * radius


def test_scene_rendering_is_bit_identical():
    a, b = bundled_scene(16), bundled_scene(16)
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    assert all(np.array_equal(x, y) for x, y in zip(a.depths, b.depths))


def test_bundled_scene_roles_and_coverage():
    scene = bundled_scene()
    assert scene.source_indices == [0, 1, 2]
    assert scene.train_indices == list(range(3, 11))
    assert scene.test_indices == [11]
    assert all(img.shape == (32, 32, 3) for img in scene.images)
    assert all(np.isfinite(d).all() for d in scene.depths)
    assert all((img >= 0).all() and (img <= 1).all() for img in scene.images)


def test_lambertian_shading_facing_light():
    doc = scene_doc([PLANE2], light={"direction": [0, 0, 1], "ambient": 0.2})
    scene = make_scene(doc)
    # light travels along +z, the plane faces -z: centre pixel has n.l = 1
    assert np.allclose(scene.images[0][12, 12], 1.0)
    doc["light"]["direction"] = [1, 0, 0]
    assert np.allclose(make_scene(doc).images[0][12, 12], 0.2)


def test_box_intersection():
    box = Box(np.array([-1.0, -1, 3]), np.array([1.0, 1, 5]), Texture("solid", ((1, 1, 1),)))
    t, n = box.intersect(np.zeros((2, 3)), np.array([[0, 0, 1.0], [1.0, 0, 0]]))
    assert t[0] == 3 and np.isinf(t[1])
    assert np.allclose(np.abs(n[0]), [0, 0, 1])


def test_sphere_and_plane_miss():
    s = Sphere(np.array([0, 0, 5.0]), 1.0, Texture("solid", ((1, 1, 1),)))
    p = Plane(np.array([0, 0, 5.0]), np.array([0, 0, 1.0]), Texture("solid", ((1, 1, 1),)))
    d = np.array([[0, 1.0, 0]])
    assert np.isinf(s.intersect(np.zeros((1, 3)), d)[0]).all()
    assert np.isinf(p.intersect(np.zeros((1, 3)), d)[0]).all()


def test_textures():
    checker = parse_texture({"type": "checker", "colors": [[1, 1, 1], [0, 0, 0]], "scale": 1.0}, "t")
    c = checker(np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]]))
    assert c[0].tolist() == [1, 1, 1] and c[1].tolist() == [0, 0, 0]
    grad = parse_texture({"type": "gradient", "colors": [[0, 0, 0], [1, 1, 1]], "axis": 1, "range": [0, 2]}, "t")
    assert np.allclose(grad(np.array([[9, 1.0, 9]])), 0.5)


@pytest.mark.parametrize("doc, fragment", [
    (scene_doc([]), "primitives"),
    (scene_doc([PLANE2], cameras=[]), "cameras"),
    (scene_doc([{"type": "cone"}]), "primitives[0]"),
    (scene_doc([{"type": "sphere", "center": [0, 0, 1], "radius": -1}]), "radius"),
    (scene_doc([PLANE2], [camera_doc(near=5, far=1)]), "cameras[0]"),
    (scene_doc([PLANE2], [camera_doc(role="spectator")]), "role"),
    (scene_doc([{"type": "sphere", "center": [0, 0], "radius": 1}]), "center"),
])
def test_malformed_specs_are_rejected(doc, fragment):
    with pytest.raises(SceneSpecError) as exc:
        make_scene(doc)
    assert fragment in str(exc.value)


def test_json_syntax_error_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "primitives": [\n    {"type": "sphere",,}\n  ]\n}\n')
    with pytest.raises(SceneSpecError) as exc:
        make_scene(path)
    assert exc.value.line == 3 and "line 3" in str(exc.value)


def test_camera_seeing_nothing_is_rejected():
    doc = scene_doc([PLANE2], [camera_doc(target=[0, 0, -1])])
    with pytest.raises(SceneSpecError):
        make_scene(doc)


def test_make_scene_accepts_text_and_full_cameras():
    cam = look_at((0, 0, 0), (0, 0, 1), focal=20, image_size=(16, 16), near=0.5, far=9)
    doc = scene_doc([PLANE2], [{**cam.to_dict(), "role": "test"}])
    scene = make_scene(json.dumps(doc))
    assert scene.test_indices == [0]
    assert np.array_equal(scene.cameras[0].world_to_camera, cam.world_to_camera)
