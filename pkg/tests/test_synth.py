import math

import numpy as np
import pytest

from geometry.motion import RigidMotion
from geometry.registration import Correspondence, merge_views
from geometry.rgbd import CameraIntrinsics, DepthImage, estimate_normals
from geometry.synth import (
    Primitive,
    Scene,
    analytic_volume,
    box_mesh,
    camera_ring,
    corrupt,
    corrupt_correspondences,
    corrupt_depth,
    corrupt_pixels,
    icosphere,
    look_at,
    render_depth,
    value_noise,
)
from geometry.volume import Plane, mesh_volume_tetrahedra

GROUND = Plane([0.0, 0.0, 1.0], 0.0)
SMALL = CameraIntrinsics(100.0, 100.0, 10.0, 10.0)


def test_analytic_volumes():
    assert analytic_volume(Primitive("sphere", (0.1,))) == pytest.approx(4.18879e-3, rel=1e-5)
    assert analytic_volume(Primitive("box", (0.1, 0.1, 0.126))) == pytest.approx(1.26e-3)
    assert analytic_volume(Primitive("cylinder", (0.05, 0.2))) == pytest.approx(1.5708e-3, rel=1e-4)


def test_scene_total_volume():
    scene = Scene((Primitive("sphere", (0.1,), RigidMotion.from_translation([0, 0, 0.1])), Primitive("box", (0.1, 0.1, 0.1), RigidMotion.from_translation([0.5, 0, 0.05]))), GROUND)
    assert scene.total_volume() == pytest.approx(4.0 / 3.0 * math.pi * 1e-3 + 1e-3)


@pytest.mark.parametrize("kind,params", [("sphere", (0.0,)), ("box", (0.1, 0.1)), ("cone", (0.1,)), ("cylinder", (0.1, -1.0))])
def test_invalid_primitives(kind, params):
    with pytest.raises(ValueError):
        Primitive(kind, params)


def test_scene_rejects_primitive_below_ground():
    with pytest.raises(ValueError):
        Scene((Primitive("sphere", (0.1,), RigidMotion.from_translation([0, 0, 0.05])),), GROUND)


def test_scene_allows_resting_contact():
    Scene((Primitive("cylinder", (0.05, 0.2), RigidMotion.from_translation([0, 0, 0.1])),), GROUND)


def test_ground_seen_from_above_has_unit_depth():
    depth, _ = render_depth(Scene((), GROUND), look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0]), SMALL, (21, 21))
    assert depth.valid.all()
    assert np.allclose(depth.data, 1.0)


def test_sphere_on_optical_axis():
    scene = Scene((Primitive("sphere", (1.0,), RigidMotion.from_translation([0.0, 0.0, 3.0])),), texture="none")
    depth, gray = render_depth(scene, RigidMotion.identity(), SMALL, (21, 21))
    assert depth.data[10, 10] == pytest.approx(2.0, abs=1e-12)
    assert gray[10, 10] == 0.5


def test_misses_are_invalid():
    scene = Scene((Primitive("sphere", (0.1,), RigidMotion.from_translation([0.0, 0.0, 3.0])),))
    depth, gray = render_depth(scene, RigidMotion.identity(), SMALL, (21, 21))
    assert depth.valid[10, 10] and not depth.valid[0, 0]
    assert gray[0, 0] == 0.0


def test_cylinder_top_depth():
    scene = Scene((Primitive("cylinder", (0.05, 0.2), RigidMotion.from_translation([0.0, 0.0, 0.1])),), GROUND)
    depth, _ = render_depth(scene, look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0]), SMALL, (21, 21))
    assert depth.data[10, 10] == pytest.approx(0.8, abs=1e-12)


def test_rendered_box_backprojects_onto_its_surface():
    intrinsics = CameraIntrinsics(200.0, 200.0, 63.5, 47.5)
    box = Primitive("box", (0.1, 0.08, 0.12), RigidMotion.from_axis_angle([0, 0, 1], 0.4, [0.0, 0.0, 0.06]))
    pose = look_at([0.35, -0.25, 0.3], [0.0, 0.0, 0.05])
    depth, _ = render_depth(Scene((box,)), pose, intrinsics, (128, 96))
    rows, cols = np.nonzero(depth.valid)
    assert len(rows) > 500
    world = pose.apply(intrinsics.backproject(cols, rows, depth.data[rows, cols]))
    assert box.surface_distance(world).max() < 1e-6


def test_texture_is_deterministic_and_seeded(rng):
    points = rng.uniform(-1, 1, size=(200, 3))
    a = value_noise(points, 0.05, seed=1)
    assert np.array_equal(a, value_noise(points, 0.05, seed=1))
    assert not np.array_equal(a, value_noise(points, 0.05, seed=2))
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_camera_ring_looks_at_target():
    target = np.array([0.0, 0.0, 0.05])
    poses = camera_ring(8, 0.6, 35.0, target)
    assert len(poses) == 8
    for pose in poses:
        to_target = target - pose.translation
        assert np.linalg.norm(to_target) == pytest.approx(0.6)
        assert np.allclose(pose.rotation[:, 2], to_target / 0.6)
        assert pose.translation[2] == pytest.approx(0.05 + 0.6 * math.sin(math.radians(35.0)))


def test_depth_noise_statistics():
    depth = DepthImage.from_array(np.ones((200, 200)))
    noisy = corrupt_depth(depth, 0.002, seed=4)
    residual = noisy.data - 1.0
    assert abs(residual.std() - 0.002) < 1e-4
    assert abs(residual.mean()) < 1e-4


def test_depth_corruption_is_reproducible_and_counts_outliers():
    data = np.tile(np.linspace(1.0, 1.5, 50)[:, None], (1, 40))
    data[:, :10] = 0.0
    depth = DepthImage.from_array(data)
    a = corrupt_depth(depth, 0.001, outlier_fraction=0.1, seed=8)
    b = corrupt_depth(depth, 0.001, outlier_fraction=0.1, seed=8)
    assert np.array_equal(a.data, b.data)
    assert not a.valid[:, :10].any()
    moved = np.count_nonzero(np.abs(a.data - data)[a.valid] > 0.01)
    assert 120 <= moved <= round(0.1 * 1500)


def test_pixel_outliers():
    pixels = np.tile([10.0, 10.0, 12.0, 11.0], (40, 1))
    corrupted, chosen = corrupt_pixels(pixels, 0.25, seed=2, size=(64, 48))
    assert len(chosen) == 10
    untouched = np.setdiff1d(np.arange(40), chosen)
    assert np.array_equal(corrupted[untouched], pixels[untouched])
    assert np.all(corrupted[:, 2] <= 63) and np.all(corrupted[:, 3] <= 47)


def test_correspondence_outliers(rng):
    corrs = [Correspondence(k, k, (0.0, 0.0), (0.0, 0.0), rng.normal(size=3), rng.normal(size=3)) for k in range(20)]
    corrupted, chosen = corrupt_correspondences(corrs, 0.0, 0.5, seed=3)
    assert len(corrupted) == 20 and len(chosen) == 10
    kept = np.setdiff1d(np.arange(20), chosen)
    assert all(np.array_equal(corrupted[k].x1, corrs[k].x1) for k in kept)


def test_corrupt_dispatches_on_type():
    depth = DepthImage.from_array(np.ones((5, 5)))
    assert isinstance(corrupt(depth, 0.001), DepthImage)
    assert corrupt([], 0.001) == []
    with pytest.raises(ValueError):
        corrupt(np.zeros((3, 4)), outlier_fraction=0.5)


def test_outlier_fraction_must_be_below_one():
    with pytest.raises(ValueError):
        corrupt_pixels(np.zeros((4, 4)), 1.0, seed=0, size=(10, 10))


def test_icosphere_is_outward_and_on_sphere():
    mesh = icosphere(0.2, 2, center=(1.0, 0.0, 0.0))
    assert np.allclose(np.linalg.norm(mesh.vertices - [1.0, 0.0, 0.0], axis=1), 0.2)
    assert mesh_volume_tetrahedra(mesh) > 0
    assert len(mesh.faces) == 20 * 4**2


def test_box_mesh_volume_and_open_sides():
    mesh = box_mesh((0.0, 0.0, 0.0), (0.1, 0.2, 0.3), subdivisions=2)
    assert mesh_volume_tetrahedra(mesh) == pytest.approx(0.006)
    with pytest.raises(ValueError):
        box_mesh(open_faces=("top",))


def sphere_views(intrinsics: CameraIntrinsics, noise_sigma: float) -> list:
    sphere = Primitive("sphere", (0.1,), RigidMotion.identity())
    views = []
    for k, pose in enumerate(camera_ring(2, 0.6, 0.0)):
        depth, _ = render_depth(Scene((sphere,)), pose, intrinsics, (intrinsics.width, intrinsics.height))
        views.append((estimate_normals(corrupt_depth(depth, noise_sigma, seed=k), intrinsics), pose))
    return views


def radial_rms(points: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.linalg.norm(points, axis=1) - 0.1) ** 2)))


@pytest.mark.parametrize("noise_sigma", [0.0, 0.002])
def test_rendered_views_merge_onto_the_surface(intrinsics, noise_sigma):
    merged = merge_views(sphere_views(intrinsics, noise_sigma))
    assert len(merged) > 1000
    assert radial_rms(merged.points) <= 3 * noise_sigma + 1e-9


def test_opposite_half_spheres_merge_without_extra_error(intrinsics):
    views = sphere_views(intrinsics, 0.002)
    single = radial_rms(views[0][1].apply(views[0][0].points))
    merged = merge_views(views)
    assert len(merged) == len(views[0][0]) + len(views[1][0])
    assert radial_rms(merged.points) < 2 * single
