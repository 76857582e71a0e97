import math

import numpy as np
import pytest

from geometry.motion import RigidMotion
from geometry.registration import (
    AlignParams,
    Correspondence,
    View,
    align_pair,
    align_views,
    icp_refine,
    merge_views,
    overlap_statistics,
    ransac_align,
    run_icp,
    solve_rigid_procrustes,
    voxel_thin,
)
from geometry.rgbd import CameraIntrinsics, OrientedPointCloud, estimate_normals
from geometry.synth import Primitive, Scene, look_at, render_depth
from geometry.volume import Plane
from tests.conftest import fibonacci_sphere, random_motion, sphere_cloud
from utils.errors import AlignmentFailureError, ArityError, RankDeficiencyError


def motion_error(a: RigidMotion, b: RigidMotion) -> tuple[float, float]:
    return float(np.linalg.norm(a.rotation - b.rotation)), a.translation_distance_to(b)


def test_procrustes_recovers_random_motions(rng):
    for _ in range(1000):
        truth = random_motion(rng)
        x1 = rng.uniform(-1, 1, size=(10, 3))
        rotation_error, translation_error = motion_error(solve_rigid_procrustes(truth.apply(x1), x1), truth)
        assert rotation_error < 1e-9 and translation_error < 1e-9


def test_procrustes_near_planar_sets_stay_proper(rng):
    for _ in range(200):
        truth = random_motion(rng)
        x1 = np.column_stack([rng.uniform(-1, 1, size=(10, 2)), rng.normal(scale=1e-6, size=10)])
        x0 = truth.apply(x1) + rng.normal(scale=1e-3, size=(10, 3))
        assert np.linalg.det(solve_rigid_procrustes(x0, x1).rotation) == pytest.approx(1.0)


def test_procrustes_is_order_invariant(rng):
    truth = random_motion(rng)
    x1 = rng.uniform(-1, 1, size=(12, 3))
    x0 = truth.apply(x1) + rng.normal(scale=1e-3, size=(12, 3))
    permutation = rng.permutation(12)
    a = solve_rigid_procrustes(x0, x1)
    b = solve_rigid_procrustes(x0[permutation], x1[permutation])
    assert max(motion_error(a, b)) < 1e-12


def test_procrustes_needs_three_pairs():
    with pytest.raises(ArityError):
        solve_rigid_procrustes(np.zeros((2, 3)), np.zeros((2, 3)))


def test_procrustes_rejects_collinear_points():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(RankDeficiencyError):
        solve_rigid_procrustes(line, line)


def planted_correspondences(rng, truth: RigidMotion, inliers: int = 30, outliers: int = 30) -> list[Correspondence]:
    x1 = rng.uniform(-0.5, 0.5, size=(inliers + outliers, 3))
    x0 = truth.apply(x1)
    x0[inliers:] = rng.uniform(-0.5, 0.5, size=(outliers, 3))
    return [Correspondence(k, k, (0.0, 0.0), (0.0, 0.0), x0[k], x1[k]) for k in range(len(x1))]


def test_ransac_rejects_planted_outliers(rng):
    truth = random_motion(rng, max_translation=0.3)
    corrs = planted_correspondences(rng, truth)
    motion, inliers = ransac_align(corrs, iterations=500, inlier_threshold=0.005, seed=7)
    assert truth.rotation_angle_to(motion) < 0.5
    assert truth.translation_distance_to(motion) < 0.005
    assert set(range(30)) <= set(inliers.tolist())


def test_ransac_is_reproducible(rng):
    corrs = planted_correspondences(rng, random_motion(rng))
    runs = [ransac_align(corrs, iterations=500, seed=11) for _ in range(3)]
    for motion, inliers in runs[1:]:
        assert np.array_equal(motion.as_matrix(), runs[0][0].as_matrix())
        assert np.array_equal(inliers, runs[0][1])


def test_ransac_needs_three_correspondences(rng):
    with pytest.raises(ArityError):
        ransac_align(planted_correspondences(rng, RigidMotion.identity(), 2, 0))


def test_ransac_fails_without_consensus(rng):
    x = rng.uniform(-1, 1, size=(4, 3))
    y = rng.uniform(-1, 1, size=(4, 3))
    corrs = [Correspondence(k, k, (0.0, 0.0), (0.0, 0.0), x[k], y[k]) for k in range(4)]
    with pytest.raises(AlignmentFailureError):
        ransac_align(corrs, iterations=50, inlier_threshold=1e-9)


def test_icp_recovers_perturbed_sphere():
    points = fibonacci_sphere(1000, 0.1)
    perturbation = RigidMotion.from_axis_angle([1.0, 2.0, 0.5], math.radians(2.0))
    result = run_icp(points, points, perturbation, max_iterations=50)
    assert result.rms < 1e-4
    assert result.iterations <= 50


def test_icp_history_never_increases(rng):
    target = fibonacci_sphere(800, 0.1) * [1.0, 0.7, 0.5]
    source = RigidMotion.from_axis_angle([0, 0, 1], 0.1, [0.01, 0.0, 0.0]).inverse().apply(target)
    result = run_icp(source, target, RigidMotion.identity(), max_iterations=50, convergence_eps=0.0)
    assert all(b <= a for a, b in zip(result.rms_history, result.rms_history[1:], strict=False))


def test_icp_refine_does_not_worsen_init():
    target = sphere_cloud(600, 0.1)
    init = RigidMotion.from_translation([0.004, 0.0, 0.0])
    refined = icp_refine(target, target, init)
    assert refined.translation_distance_to(RigidMotion.identity()) < init.translation_distance_to(RigidMotion.identity())


def test_merge_views_maps_to_world():
    cloud = OrientedPointCloud(np.array([[0.0, 0.0, 1.0]]), np.array([[0.0, 0.0, -1.0]]))
    merged = merge_views([(cloud, RigidMotion.identity()), (cloud, RigidMotion.from_translation([1.0, 0.0, 0.0]))])
    assert np.allclose(merged.points, [[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
    assert np.allclose(merged.normals, [[0.0, 0.0, -1.0]] * 2)


def test_voxel_thin_averages_per_cell():
    points = np.array([[0.001, 0.001, 0.001], [0.003, 0.003, 0.003], [0.5, 0.5, 0.5]])
    normals = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    thinned = voxel_thin(OrientedPointCloud(points, normals), 0.01)
    assert len(thinned) == 2
    assert np.allclose(thinned.points[0], [0.002, 0.002, 0.002])


def test_align_views_poses_mode_uses_given_poses():
    pose = RigidMotion.from_translation([0.0, 1.0, 0.0])
    cloud = sphere_cloud(10, 0.1)
    views = [View(0, None, cloud, pose=RigidMotion.identity()), View(1, None, cloud, pose=pose)]
    result = align_views(views, CameraIntrinsics(1.0, 1.0, 0.0, 0.0), AlignParams(mode="poses"))
    assert result.motions[1] is pose


def test_align_views_poses_mode_requires_every_pose():
    cloud = sphere_cloud(10, 0.1)
    views = [View(0, None, cloud, pose=RigidMotion.identity()), View(1, None, cloud)]
    with pytest.raises(AlignmentFailureError) as info:
        align_views(views, CameraIntrinsics(1.0, 1.0, 0.0, 0.0), AlignParams(mode="poses"))
    assert info.value.view == 1


def render_view(index: int, scene: Scene, pose: RigidMotion, intrinsics: CameraIntrinsics) -> View:
    depth, gray = render_depth(scene, pose, intrinsics, (intrinsics.width, intrinsics.height))
    return View(index, depth, estimate_normals(depth, intrinsics), gray, pose)


def injected_pixels(view0: View, view1: View, intrinsics: CameraIntrinsics, step: int = 12) -> np.ndarray:
    """Pixel pairs from view 0 reprojected into view 1 through the true poses."""
    rows, cols = np.mgrid[6 : view0.depth.height - 6 : step, 6 : view0.depth.width - 6 : step]
    rows, cols = rows.ravel(), cols.ravel()
    keep = view0.depth.valid[rows, cols]
    rows, cols = rows[keep], cols[keep]
    world = view0.pose.apply(intrinsics.backproject(cols, rows, view0.depth.data[rows, cols]))
    uvz = intrinsics.project(view1.pose.inverse().apply(world))
    inside = (uvz[:, 0] >= 0) & (uvz[:, 0] <= intrinsics.width - 1) & (uvz[:, 1] >= 0) & (uvz[:, 1] <= intrinsics.height - 1) & (uvz[:, 2] > 0)
    return np.column_stack([cols, rows, uvz[:, 0], uvz[:, 1]])[inside]


def test_align_pair_with_injected_correspondences():
    intrinsics = CameraIntrinsics(300.0, 300.0, 79.5, 59.5, 160, 120)
    box = Primitive("box", (0.1, 0.1, 0.1), RigidMotion.from_translation([0.0, 0.0, 0.05]))
    scene = Scene((box,), Plane([0.0, 0.0, 1.0], 0.0), texture="none")
    view0 = render_view(0, scene, look_at([0.5, 0.0, 0.35], [0.0, 0.0, 0.0]), intrinsics)
    view1 = render_view(1, scene, look_at([0.45, 0.2, 0.35], [0.0, 0.0, 0.0]), intrinsics)
    pixels = injected_pixels(view0, view1, intrinsics)
    assert len(pixels) >= 20

    params = AlignParams(ransac_iterations=300, inlier_threshold=0.005, icp_iterations=0)
    pair = align_pair(view0, view1, intrinsics, params, injected=pixels)
    truth = view0.pose.inverse().compose(view1.pose)
    assert pair.icp_rms is None
    assert pair.inliers >= 10
    assert pair.overlap >= params.min_overlap and pair.overlap_rms <= params.max_overlap_rms
    assert truth.rotation_angle_to(pair.motion) < 1.0
    assert truth.translation_distance_to(pair.motion) < 0.01


def test_align_pair_without_image_fails():
    cloud = sphere_cloud(10, 0.1)
    view = View(0, None, cloud)
    with pytest.raises(AlignmentFailureError):
        align_pair(view, View(1, None, cloud), CameraIntrinsics(1.0, 1.0, 0.0, 0.0), AlignParams())


def test_icp_cap_keeps_far_points_out_of_the_fit():
    points = fibonacci_sphere(400, 0.1)
    clutter = fibonacci_sphere(600, 0.05) + [0.5, 0.0, 0.0]
    source = np.vstack([points, clutter])
    perturbation = RigidMotion.from_axis_angle([1.0, 2.0, 0.5], math.radians(2.0))
    result = run_icp(source, points, perturbation, max_iterations=50, convergence_eps=0.0, max_distance=0.02)
    assert result.motion.rotation_angle_to(RigidMotion.identity()) < 0.05
    assert result.motion.translation_distance_to(RigidMotion.identity()) < 1e-4
    assert result.rms == pytest.approx(0.02 * math.sqrt(0.6), rel=1e-3)
    assert all(b <= a for a, b in zip(result.rms_history, result.rms_history[1:], strict=False))


def test_overlap_statistics():
    target = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    source = np.array([[0.0, 0.0, 0.003], [1.0, 0.0, 0.004], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0]])
    overlap, rms = overlap_statistics(source, target, RigidMotion.identity(), 0.02)
    assert overlap == 0.5
    assert rms == pytest.approx(math.sqrt((0.003**2 + 0.004**2) / 2))
    assert overlap_statistics(source, target, RigidMotion.from_translation([0.0, 0.0, 1.0]), 0.02) == (0.0, 0.0)


def box_views(intrinsics: CameraIntrinsics, *eyes) -> list[View]:
    box = Primitive("box", (0.1, 0.1, 0.1), RigidMotion.from_translation([0.0, 0.0, 0.05]))
    scene = Scene((box,), Plane([0.0, 0.0, 1.0], 0.0), texture="none")
    return [render_view(k, scene, look_at(eye, [0.0, 0.0, 0.0]), intrinsics) for k, eye in enumerate(eyes)]


def same_pixels(view: View, step: int = 8) -> np.ndarray:
    rows, cols = np.nonzero(view.depth.valid)
    pick = (rows % step == 0) & (cols % step == 0)
    return np.column_stack([cols[pick], rows[pick], cols[pick], rows[pick]]).astype(np.float64)


def test_align_pair_rejects_motion_the_clouds_disagree_with():
    intrinsics = CameraIntrinsics(300.0, 300.0, 79.5, 59.5, 160, 120)
    (view0,) = box_views(intrinsics, [0.5, 0.0, 0.35])
    params = AlignParams(ransac_iterations=100, icp_iterations=0)

    twin = View(1, view0.depth, view0.cloud)
    pair = align_pair(view0, twin, intrinsics, params, injected=same_pixels(view0))
    assert pair.overlap == 1.0 and pair.overlap_rms < 1e-9

    shifted = OrientedPointCloud(view0.cloud.points + [0.0, 0.0, 0.1], view0.cloud.normals)
    with pytest.raises(AlignmentFailureError, match="rejected") as info:
        align_pair(view0, View(1, view0.depth, shifted), intrinsics, params, injected=same_pixels(view0))
    assert info.value.view == 1


def test_align_views_falls_back_to_a_placed_neighbour():
    intrinsics = CameraIntrinsics(300.0, 300.0, 79.5, 59.5, 160, 120)
    views = box_views(intrinsics, [0.5, 0.0, 0.35], [0.45, 0.2, 0.35], [0.3, 0.35, 0.45])
    injected = {
        (0, 1): injected_pixels(views[0], views[1], intrinsics),
        (0, 2): same_pixels(views[0]),
        (1, 2): injected_pixels(views[1], views[2], intrinsics),
    }
    result = align_views(views, intrinsics, AlignParams(ransac_iterations=300, icp_iterations=0), injected)

    assert result.references == [None, 0, 1]
    assert result.overlap_rms[2] <= AlignParams().max_overlap_rms
    truth = views[0].pose.inverse().compose(views[2].pose)
    assert truth.rotation_angle_to(result.motions[2]) < 1.0
    assert truth.translation_distance_to(result.motions[2]) < 0.01
