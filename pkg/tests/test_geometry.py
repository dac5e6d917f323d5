import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from golfnrt.geometry import (Camera, GeometryError, RayBundle, SamplePoints, generate_rays, intrinsics_matrix,
                              look_at, pixel_centers, project, sample_uniform, unproject)


def identity_camera(h=32, w=48, focal=40.0, near=0.5, far=10.0):
    return Camera(intrinsics_matrix(focal, (h, w)), np.eye(4), (h, w), near, far)


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    # rotation taking camera +z to world (sin, 0, cos) is the transpose of this world_to_camera block
    return np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]])


def random_camera(rng):
    eye = rng.uniform(-2, 2, 3)
    target = eye + np.array([0, 0, 5]) + rng.uniform(-1, 1, 3)
    return look_at(eye, target, focal=rng.uniform(20, 60), image_size=(24, 32), near=0.5, far=20.0)


# ---------------------------------------------------------------------------
# Camera validation


def test_camera_rejects_bad_intrinsics():
    K = intrinsics_matrix(10, (8, 8))
    K[0, 0] = -1
    with pytest.raises(GeometryError):
        Camera(K, np.eye(4), (8, 8), 1, 2)
    K = intrinsics_matrix(10, (8, 8))
    K[1, 0] = 0.3
    with pytest.raises(GeometryError):
        Camera(K, np.eye(4), (8, 8), 1, 2)


def test_camera_rejects_non_rigid_pose_and_bad_depth_range():
    T = np.eye(4)
    T[0, 0] = 1.01
    with pytest.raises(GeometryError):
        Camera(intrinsics_matrix(10, (8, 8)), T, (8, 8), 1, 2)
    with pytest.raises(GeometryError):
        identity_camera(near=2.0, far=2.0)
    with pytest.raises(GeometryError):
        identity_camera(near=0.0, far=2.0)


def test_camera_json_round_trip(tmp_path):
    cam = random_camera(np.random.default_rng(0))
    doc = json.loads(cam.to_json())
    assert len(doc["intrinsics"]) == 9 and len(doc["world_to_camera"]) == 16
    assert doc["size"] == [24, 32]
    back = Camera.from_json(cam.to_json())
    assert np.array_equal(back.intrinsics, cam.intrinsics)
    assert np.array_equal(back.world_to_camera, cam.world_to_camera)
    cam.save(tmp_path / "cam.json")
    assert Camera.from_json((tmp_path / "cam.json").read_text()).image_size == (24, 32)


def test_camera_from_malformed_document():
    with pytest.raises(GeometryError):
        Camera.from_dict({"intrinsics": [1, 2]})


def test_look_at_points_optical_axis_at_target():
    cam = look_at((1, 2, 3), (1, 2, 8), focal=30, image_size=(16, 16), near=1, far=9)
    assert np.allclose(cam.optical_axis, [0, 0, 1])
    assert np.allclose(cam.center, [1, 2, 3])
    pix, z, inside = project(cam, np.array([[1, 2, 8]]))
    assert np.allclose(pix, [[8, 8]]) and np.isclose(z[0], 5) and inside[0]


def test_look_at_rejects_parallel_up():
    with pytest.raises(GeometryError):
        look_at((0, 0, 0), (0, 1, 0), up=(0, 1, 0), focal=10, image_size=(8, 8), near=1, far=2)


# ---------------------------------------------------------------------------
# generate_rays


def test_principal_point_ray_is_optical_axis():
    cam = identity_camera()
    rays = generate_rays(cam, [(16, 24)])
    assert np.allclose(rays.directions, [[0, 0, 1]], atol=1e-15)
    assert np.allclose(rays.origins, 0)


def test_identity_pose_origins_are_zero():
    cam = identity_camera()
    rays = generate_rays(cam, pixel_centers(cam))
    assert np.array_equal(rays.origins, np.zeros_like(rays.origins))
    assert np.allclose(np.linalg.norm(rays.directions, axis=1), 1, atol=1e-12)


def test_rotated_camera_principal_ray():
    T = np.eye(4)
    T[:3, :3] = rot_y(np.pi / 2)
    cam = Camera(intrinsics_matrix(40, (32, 48)), T, (32, 48), 0.5, 10)
    d = generate_rays(cam, [(16, 24)]).directions[0]
    assert np.allclose(d, [1, 0, 0], atol=1e-12)


def test_generate_rays_out_of_bounds():
    cam = identity_camera()
    with pytest.raises(GeometryError):
        generate_rays(cam, [(-0.1, 3)])
    with pytest.raises(GeometryError):
        generate_rays(cam, [(3, 48.5)])


def test_rays_pass_through_their_pixels():
    rng = np.random.default_rng(1)
    cam = random_camera(rng)
    px = rng.uniform([0, 0], [24, 32], (50, 2))
    rays = generate_rays(cam, px)
    pts = rays.origins + 3.7 * rays.directions
    back, _, _ = project(cam, pts)
    assert np.abs(back - px).max() < 1e-9


def test_ray_bundle_validation():
    with pytest.raises(GeometryError):
        RayBundle(np.zeros((2, 3)), np.array([[0, 0, 2.0], [0, 0, 1]]), 1, 2)
    with pytest.raises(GeometryError):
        RayBundle(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), 3, 2)


def test_ray_bundle_slicing_and_concatenation():
    cam = identity_camera()
    rays = generate_rays(cam, pixel_centers(cam)[:10])
    both = RayBundle.concatenate([rays[:4], rays[4:]])
    assert np.array_equal(both.directions, rays.directions)
    assert len(rays[3]) == 1


# ---------------------------------------------------------------------------
# project / unproject


def test_project_on_axis_point():
    cam = identity_camera()
    pix, z, inside = project(cam, np.array([[0, 0, 1.0]]))
    assert np.allclose(pix, [[16, 24]]) and z[0] == 1 and inside[0]


def test_project_behind_camera_is_outside():
    cam = identity_camera()
    pix, z, inside = project(cam, np.array([[0, 0, -1.0], [0, 0, 0.0]]))
    assert not inside.any()
    assert np.isfinite(pix).all()


def test_project_frustum_limits():
    cam = identity_camera(near=1, far=5)
    pts = np.array([[0, 0, 0.9], [0, 0, 5.1], [100, 0, 2], [0, 0, 3]])
    _, _, inside = project(cam, pts)
    assert inside.tolist() == [False, False, False, True]


def test_project_border_counts_as_inside():
    cam = identity_camera()
    corner = unproject(cam, [(0, 0), (32, 48)], [2.0, 2.0])
    _, _, inside = project(cam, corner)
    assert inside.all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_project_unproject_round_trip(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    px = rng.uniform([0, 0], [24, 32], (20, 2))
    pts = unproject(cam, px, rng.uniform(1, 15, 20))
    pix, z, inside = project(cam, pts)
    assert inside.all()
    back = unproject(cam, pix, z)
    assert np.abs(back - pts).max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_epipolar_collinearity(seed):
    rng = np.random.default_rng(seed)
    target, source = random_camera(rng), random_camera(rng)
    rays = generate_rays(target, rng.uniform([0, 0], [24, 32], (1, 2)))
    samples = sample_uniform(rays, 16)
    pix, z, _ = project(source, samples.positions[0])
    ok = z > 1e-3
    pix = pix[ok]
    if len(pix) < 3:
        return
    # distance of every projection to the line through the two extremes
    a, b = pix[0], pix[-1]
    direction = (b - a) / np.linalg.norm(b - a)
    rel = pix - a
    off = np.abs(rel[:, 0] * direction[1] - rel[:, 1] * direction[0])
    assert off.max() < 1e-5


# ---------------------------------------------------------------------------
# sample_uniform


def bundle(near, far, n=1):
    return RayBundle(np.zeros((n, 3)), np.tile([0, 0, 1.0], (n, 1)), near, far)


def test_sample_uniform_midpoints():
    s = sample_uniform(bundle(0, 1), 4)
    assert np.allclose(s.depths, [[0.125, 0.375, 0.625, 0.875]], atol=1e-15)


def test_sample_uniform_two_bins():
    s = sample_uniform(bundle(2, 4), 2)
    assert np.allclose(s.depths, [[2.5, 3.5]])


def test_sample_uniform_jitter_in_bins_and_deterministic():
    rays = bundle(1, 3, n=5)
    a = sample_uniform(rays, 8, jitter=True, rng=np.random.default_rng(7))
    b = sample_uniform(rays, 8, jitter=True, rng=np.random.default_rng(7))
    assert np.array_equal(a.depths, b.depths)
    edges = 1 + 2 * np.arange(9) / 8
    assert ((a.depths >= edges[:-1]) & (a.depths <= edges[1:])).all()
    assert (np.diff(a.depths, axis=1) > 0).all()


def test_sample_uniform_per_ray_generators_are_batch_independent():
    rays = bundle(1, 3, n=3)
    full = sample_uniform(rays, 6, jitter=True, rng=[np.random.default_rng(i) for i in range(3)])
    one = sample_uniform(rays[1], 6, jitter=True, rng=[np.random.default_rng(1)])
    assert np.array_equal(full.depths[1], one.depths[0])


def test_sample_uniform_needs_two_samples():
    with pytest.raises(GeometryError):
        sample_uniform(bundle(0, 1), 1)


def test_sample_positions_match_depths_exactly():
    rng = np.random.default_rng(3)
    cam = random_camera(rng)
    rays = generate_rays(cam, pixel_centers(cam)[::37])
    s = sample_uniform(rays, 9, jitter=True, rng=rng)
    recomputed = rays.origins[:, None] + s.depths[..., None] * rays.directions[:, None]
    assert np.array_equal(recomputed, s.positions)
    assert isinstance(SamplePoints.along(rays, s.depths), SamplePoints)
