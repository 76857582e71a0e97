"""
Rigid registration of depth views.

Pairwise alignment estimates a motion g with x0 ~ g(x1) from 3-d correspondences:
RANSAC over minimal Procrustes hypotheses, a refit on the winning consensus set and
point-to-point ICP refinement. Views are then chained into the frame of view 0 and
merged into one oriented cloud.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from geometry.features import DetectorParams, Keypoint, detect_and_describe, match_forward_backward, stack_descriptors
from geometry.motion import RigidMotion
from geometry.rgbd import CameraIntrinsics, DepthImage, OrientedPointCloud
from utils.errors import AlignmentFailureError, ArityError, IcpDivergenceError, RankDeficiencyError
from utils.logger import get_logger

logger = get_logger(__name__)

COLLINEAR_TOL = 1e-9
RESIDUAL_BATCH = 256


@dataclass(frozen=True)
class Correspondence:
    i: int
    j: int
    p0: tuple[float, float]
    p1: tuple[float, float]
    x0: np.ndarray
    x1: np.ndarray


def correspondence_arrays(corrs: list[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    if not corrs:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.stack([c.x0 for c in corrs]), np.stack([c.x1 for c in corrs])


def solve_rigid_procrustes(x0: np.ndarray, x1: np.ndarray) -> RigidMotion:
    """
    Least-squares rigid motion g minimizing sum ||x0 - g(x1)||^2.

    Args:
        x0: (N,3) target points
        x1: (N,3) source points, paired row by row with x0

    Returns:
        The optimal proper RigidMotion

    Raises:
        ArityError: If fewer than 3 pairs are given
        RankDeficiencyError: If the source points are collinear or coincident
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, 3)
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 3)
    if len(x0) != len(x1):
        raise ArityError(f"point sets differ in length: {len(x0)} vs {len(x1)}")
    if len(x0) < 3:
        raise ArityError(f"Procrustes needs at least 3 pairs, got {len(x0)}")

    mean0 = x0.mean(axis=0)
    mean1 = x1.mean(axis=0)
    c0 = x0 - mean0
    c1 = x1 - mean1
    spread = np.linalg.svd(c1, compute_uv=False)
    if spread[0] == 0.0 or spread[1] <= COLLINEAR_TOL * spread[0]:
        raise RankDeficiencyError("source points are collinear; rotation is not determined")

    h = c0.T @ c1
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    rotation = u @ np.diag([1.0, 1.0, d]) @ vt
    return RigidMotion(rotation, mean0 - rotation @ mean1)


def _batched_procrustes(x0: np.ndarray, x1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Procrustes over (T,3,3) triples; returns (T,3,3) rotations and (T,3) translations."""
    mean0 = x0.mean(axis=1)
    mean1 = x1.mean(axis=1)
    h = np.einsum("tki,tkj->tij", x0 - mean0[:, None, :], x1 - mean1[:, None, :])
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    d[d == 0] = 1.0
    fix = np.tile(np.eye(3), (len(h), 1, 1))
    fix[:, 2, 2] = d
    rotations = u @ fix @ vt
    translations = mean0 - np.einsum("tij,tj->ti", rotations, mean1)
    return rotations, translations


def _non_degenerate(x1: np.ndarray) -> np.ndarray:
    """True for triples whose source points span a triangle."""
    a, b, c = x1[:, 0], x1[:, 1], x1[:, 2]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    scale = np.maximum(np.linalg.norm(b - a, axis=1), np.linalg.norm(c - a, axis=1)) ** 2
    return area2 > COLLINEAR_TOL * np.maximum(scale, np.finfo(float).tiny)


def sample_triples(n: int, iterations: int, seed: int) -> np.ndarray:
    """Draw ``iterations`` triples of distinct indices from a seeded generator."""
    rng = np.random.default_rng(seed)
    return np.stack([rng.choice(n, size=3, replace=False) for _ in range(iterations)]) if iterations else np.zeros((0, 3), dtype=int)


def ransac_align(corrs: list[Correspondence], iterations: int = 1000, inlier_threshold: float = 0.005, seed: int = 0) -> tuple[RigidMotion, np.ndarray]:
    """
    Consensus rigid alignment over minimal three-match hypotheses.

    Hypotheses are ranked by inlier count, then by lower summed inlier residual, then by
    earlier iteration. The winner is refit on its full inlier set.

    Args:
        corrs: Putative correspondences; x0 is the target, x1 the source
        iterations: Number of sampled hypotheses
        inlier_threshold: Maximum ||x0 - g(x1)|| for an inlier, in meters
        seed: Sampling seed

    Returns:
        Tuple of (refit motion, sorted inlier indices)

    Raises:
        ArityError: If fewer than 3 correspondences are given
        AlignmentFailureError: If no hypothesis has at least 3 inliers
    """
    if len(corrs) < 3:
        raise ArityError(f"RANSAC needs at least 3 correspondences, got {len(corrs)}")
    x0, x1 = correspondence_arrays(corrs)
    triples = sample_triples(len(corrs), iterations, seed)

    counts = np.full(len(triples), -1, dtype=np.int64)
    residual_sums = np.full(len(triples), np.inf)
    for start in range(0, len(triples), RESIDUAL_BATCH):
        batch = triples[start : start + RESIDUAL_BATCH]
        usable = _non_degenerate(x1[batch])
        if not np.any(usable):
            continue
        rotations, translations = _batched_procrustes(x0[batch[usable]], x1[batch[usable]])
        predicted = np.einsum("tij,nj->tni", rotations, x1) + translations[:, None, :]
        residuals = np.linalg.norm(x0[None, :, :] - predicted, axis=2)
        inliers = residuals <= inlier_threshold
        positions = start + np.flatnonzero(usable)
        counts[positions] = inliers.sum(axis=1)
        residual_sums[positions] = np.where(inliers, residuals, 0.0).sum(axis=1)

    order = np.lexsort((np.arange(len(triples)), residual_sums, -counts))
    if len(order) == 0 or counts[order[0]] < 3:
        raise AlignmentFailureError(f"no hypothesis reached 3 inliers in {iterations} iterations")
    best = order[0]

    rotations, translations = _batched_procrustes(x0[triples[best]][None], x1[triples[best]][None])
    hypothesis = RigidMotion(rotations[0], translations[0])
    inliers = np.flatnonzero(np.linalg.norm(x0 - hypothesis.apply(x1), axis=1) <= inlier_threshold)
    motion = solve_rigid_procrustes(x0[inliers], x1[inliers])
    logger.debug(f"ransac_align: best hypothesis {best} with {counts[best]} of {len(corrs)} inliers")
    return motion, inliers


@dataclass
class IcpResult:
    motion: RigidMotion
    rms_history: list[float]
    iterations: int

    @property
    def rms(self) -> float:
        return self.rms_history[-1]


def run_icp(
    source: np.ndarray,
    target: np.ndarray,
    init: RigidMotion,
    max_iterations: int = 50,
    convergence_eps: float = 1e-7,
    cutoff_factor: float = 3.0,
    max_distance: float | None = None,
) -> IcpResult:
    """
    Point-to-point ICP with a median-based distance cutoff.

    Pairs farther than ``cutoff_factor`` times the median pair distance are rejected, and
    farther than ``max_distance`` when one is given. With ``max_distance`` the residual is
    truncated there, so source points outside the overlap add a constant instead of pulling
    the estimate. A step is accepted only if the closest-point RMS over all source points
    does not increase, so the recorded history is non-increasing.

    Raises:
        IcpDivergenceError: If fewer than 3 pairs survive the cutoff; carries the last motion
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    tree = cKDTree(target)
    cap = np.inf if max_distance is None else max_distance

    def residual(d: np.ndarray) -> float:
        return float(np.sqrt(np.mean(np.minimum(d, cap) ** 2)))

    motion = init
    distances, nearest = tree.query(motion.apply(source))
    rms = residual(distances)
    history = [rms]
    iteration = 0
    while iteration < max_iterations and rms > 0.0:
        iteration += 1
        moved = motion.apply(source)
        keep = distances <= min(cutoff_factor * np.median(distances), cap)
        if np.count_nonzero(keep) < 3:
            raise IcpDivergenceError(f"all but {np.count_nonzero(keep)} pairs rejected at iteration {iteration}", last_motion=motion)
        try:
            step = solve_rigid_procrustes(target[nearest[keep]], moved[keep])
        except RankDeficiencyError as e:
            raise IcpDivergenceError(f"degenerate pair set at iteration {iteration}", last_motion=motion) from e

        candidate = step.compose(motion)
        new_distances, new_nearest = tree.query(candidate.apply(source))
        new_rms = residual(new_distances)
        if new_rms > rms:
            logger.debug(f"icp: step {iteration} would raise RMS {rms:.3e} -> {new_rms:.3e}; stopping")
            break
        motion, distances, nearest = candidate, new_distances, new_nearest
        history.append(new_rms)
        converged = rms - new_rms < convergence_eps
        rms = new_rms
        if converged:
            break
    logger.debug(f"icp: {iteration} iterations, RMS {history[0]:.3e} -> {history[-1]:.3e}")
    return IcpResult(motion, history, iteration)


def icp_refine(source: OrientedPointCloud, target: OrientedPointCloud, init: RigidMotion, max_iterations: int = 50, convergence_eps: float = 1e-7) -> RigidMotion:
    """Refine ``init`` so that init(source) fits target; see run_icp."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("ICP needs non-empty clouds")
    return run_icp(source.points, target.points, init, max_iterations, convergence_eps).motion


def voxel_thin(cloud: OrientedPointCloud, voxel_size: float) -> OrientedPointCloud:
    """Average points and normals per occupied voxel; cells are ordered lexicographically."""
    if voxel_size <= 0 or len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)

    def average(values: np.ndarray) -> np.ndarray:
        out = np.zeros((len(counts), values.shape[1]))
        for axis in range(values.shape[1]):
            out[:, axis] = np.bincount(inverse, weights=values[:, axis], minlength=len(counts))
        return out / counts[:, None]

    points = average(cloud.points)
    normals = average(cloud.normals)
    norms = np.linalg.norm(normals, axis=1)
    keep = norms > 1e-12
    colors = None
    if cloud.colors is not None:
        colors = np.round(average(cloud.colors.astype(np.float64)))[keep]
    logger.debug(f"voxel_thin: {len(cloud)} -> {int(keep.sum())} points at {voxel_size} m")
    return OrientedPointCloud(points[keep], normals[keep] / norms[keep, None], colors)


def merge_views(views: list[tuple[OrientedPointCloud, RigidMotion]], voxel_size: float | None = None) -> OrientedPointCloud:
    """
    Map every view into the world frame and concatenate.

    Args:
        views: (camera-frame cloud, camera-to-world motion) per view
        voxel_size: Optional thinning cell size in meters

    Returns:
        The merged world-frame cloud
    """
    if not views:
        raise ValueError("merge_views needs at least one view")
    merged = OrientedPointCloud.concatenate([cloud.transformed(motion) for cloud, motion in views])
    if voxel_size:
        merged = voxel_thin(merged, voxel_size)
    return merged


def _sample_depth(depth: DepthImage, u: float, v: float) -> float | None:
    col, row = int(round(u)), int(round(v))
    if 0 <= row < depth.height and 0 <= col < depth.width and depth.valid[row, col]:
        return float(depth.data[row, col])
    return None


def correspondences_from_pixels(pixels: np.ndarray, depth0: DepthImage, depth1: DepthImage, intrinsics: CameraIntrinsics) -> list[Correspondence]:
    """
    Lift (u0, v0, u1, v1) pixel pairs to 3-d correspondences.

    Pairs where either pixel has no valid depth are dropped. Indices i and j are the
    row number of the pair.
    """
    out = []
    for row, (u0, v0, u1, v1) in enumerate(np.asarray(pixels, dtype=np.float64).reshape(-1, 4)):
        z0 = _sample_depth(depth0, u0, v0)
        z1 = _sample_depth(depth1, u1, v1)
        if z0 is None or z1 is None:
            continue
        out.append(Correspondence(row, row, (u0, v0), (u1, v1), intrinsics.backproject(u0, v0, z0), intrinsics.backproject(u1, v1, z1)))
    return out


def build_correspondences(
    matches: list[tuple[int, int]], keypoints0: list[Keypoint], keypoints1: list[Keypoint], depth0: DepthImage, depth1: DepthImage, intrinsics: CameraIntrinsics
) -> list[Correspondence]:
    """Backproject matched keypoints; matches without valid depth at both ends are dropped."""
    out = []
    for i, j in matches:
        k0, k1 = keypoints0[i], keypoints1[j]
        z0 = _sample_depth(depth0, k0.u, k0.v)
        z1 = _sample_depth(depth1, k1.u, k1.v)
        if z0 is None or z1 is None:
            continue
        out.append(Correspondence(i, j, (k0.u, k0.v), (k1.u, k1.v), intrinsics.backproject(k0.u, k0.v, z0), intrinsics.backproject(k1.u, k1.v, z1)))
    return out


@dataclass
class View:
    """One loaded RGBD view; ``cloud`` is in the camera frame."""

    index: int
    depth: DepthImage
    cloud: OrientedPointCloud
    image: np.ndarray | None = None
    pose: RigidMotion | None = None
    features: list[tuple[Keypoint, np.ndarray]] | None = None


@dataclass(frozen=True)
class AlignParams:
    mode: str = "features"
    ransac_iterations: int = 1000
    inlier_threshold: float = 0.005
    icp_iterations: int = 50
    icp_eps: float = 1e-7
    icp_max_points: int = 20000
    icp_max_distance: float = 0.02
    min_overlap: float = 0.2
    max_overlap_rms: float = 0.0075
    max_match_distance: float = 0.7
    min_matches: int = 3
    seed: int = 0
    detector: DetectorParams = field(default_factory=DetectorParams)


@dataclass
class PairAlignment:
    """An accepted pairwise motion and the evidence it was accepted on."""

    motion: RigidMotion
    inliers: int
    icp_rms: float | None
    overlap: float
    overlap_rms: float


@dataclass
class AlignmentResult:
    motions: list[RigidMotion]
    references: list[int | None]
    inlier_counts: list[int | None]
    icp_rms: list[float | None]
    overlap_rms: list[float | None]


def _subsample(points: np.ndarray, limit: int) -> np.ndarray:
    if limit <= 0 or len(points) <= limit:
        return points
    return points[:: int(np.ceil(len(points) / limit))]


def overlap_statistics(source: np.ndarray, target: np.ndarray, motion: RigidMotion, max_distance: float) -> tuple[float, float]:
    """
    Fraction of moved source points within ``max_distance`` of the target, and their RMS distance.

    The RMS is 0 when nothing overlaps.
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(source) == 0 or len(target) == 0:
        return 0.0, 0.0
    distances, _ = cKDTree(target).query(motion.apply(source))
    near = distances <= max_distance
    if not np.any(near):
        return 0.0, 0.0
    return float(np.mean(near)), float(np.sqrt(np.mean(distances[near] ** 2)))


def align_pair(target: View, source: View, intrinsics: CameraIntrinsics, params: AlignParams, injected: np.ndarray | None = None) -> PairAlignment:
    """
    Estimate g with target-frame points ~ g(source-frame points).

    The refined motion is accepted only if at least ``min_overlap`` of the source cloud lands
    within ``icp_max_distance`` of the target and those points fit to an RMS of at most
    ``max_overlap_rms``.

    Raises:
        AlignmentFailureError: If too few correspondences exist, RANSAC fails or the
            refined motion is rejected
    """
    if injected is not None:
        corrs = correspondences_from_pixels(injected, target.depth, source.depth, intrinsics)
    else:
        for view in (target, source):
            if view.features is None:
                if view.image is None:
                    raise AlignmentFailureError("no image to detect features in", view=view.index)
                view.features = detect_and_describe(view.image, params.detector)
        matches = match_forward_backward(stack_descriptors(target.features), stack_descriptors(source.features), params.max_match_distance)
        corrs = build_correspondences(matches, [k for k, _ in target.features], [k for k, _ in source.features], target.depth, source.depth, intrinsics)
    if len(corrs) < max(3, params.min_matches):
        raise AlignmentFailureError(f"only {len(corrs)} correspondences with view {target.index}", view=source.index)

    motion, inliers = ransac_align(corrs, params.ransac_iterations, params.inlier_threshold, params.seed)
    if len(source.cloud) == 0 or len(target.cloud) == 0:
        raise AlignmentFailureError(f"empty cloud in pair with view {target.index}", view=source.index)
    points = _subsample(source.cloud.points, params.icp_max_points)
    icp_rms = None
    if params.icp_iterations > 0:
        try:
            result = run_icp(points, target.cloud.points, motion, params.icp_iterations, params.icp_eps, max_distance=params.icp_max_distance)
            motion, icp_rms = result.motion, result.rms
        except IcpDivergenceError as e:
            logger.warning(f"ICP diverged for view {source.index} against view {target.index}: {e}; keeping the RANSAC motion")

    overlap, overlap_rms = overlap_statistics(points, target.cloud.points, motion, params.icp_max_distance)
    if overlap < params.min_overlap or overlap_rms > params.max_overlap_rms:
        raise AlignmentFailureError(
            f"rejected against view {target.index}: {100 * overlap:.1f}% overlap at RMS {overlap_rms:.2e} m "
            f"(need {100 * params.min_overlap:.1f}% at most {params.max_overlap_rms:.2e} m)",
            view=source.index,
        )
    return PairAlignment(motion, len(inliers), icp_rms, overlap, overlap_rms)


def align_views(views: list[View], intrinsics: CameraIntrinsics, params: AlignParams, injected: dict[tuple[int, int], np.ndarray] | None = None) -> AlignmentResult:
    """
    Place every view in a common world frame.

    In ``poses`` mode the views' own camera-to-world poses are used. In ``features`` mode
    view 0 defines the world frame; each other view is aligned to view 0 when possible,
    else to the nearest (by index) view already placed. Views that cannot be placed are
    retried after each successful pass.

    Args:
        views: Loaded views in order
        intrinsics: Shared intrinsics
        params: Alignment parameters
        injected: Optional pixel correspondences keyed by (target index, source index)

    Raises:
        AlignmentFailureError: Naming the first view that could not be placed
    """
    n = len(views)
    if n == 0:
        raise ValueError("align_views needs at least one view")
    if params.mode == "poses":
        missing = [v.index for v in views if v.pose is None]
        if missing:
            raise AlignmentFailureError("poses mode requires a pose file for every view", view=missing[0])
        return AlignmentResult([v.pose for v in views], [None] * n, [None] * n, [None] * n, [None] * n)
    if params.mode != "features":
        raise ValueError(f"unknown alignment mode: {params.mode}")

    injected = injected or {}
    motions: list[RigidMotion | None] = [RigidMotion.identity()] + [None] * (n - 1)
    references: list[int | None] = [None] * n
    inlier_counts: list[int | None] = [None] * n
    icp_rms: list[float | None] = [None] * n
    overlap_rms: list[float | None] = [None] * n
    failures: dict[int, Exception] = {}

    progress = True
    while progress and any(m is None for m in motions):
        progress = False
        for k in range(1, n):
            if motions[k] is not None:
                continue
            placed = sorted((a for a in range(n) if motions[a] is not None), key=lambda a: (a != 0, abs(a - k), a))
            for a in placed:
                try:
                    pair = align_pair(views[a], views[k], intrinsics, params, injected.get((a, k)))
                except AlignmentFailureError as e:
                    failures[k] = e
                    logger.debug(f"view {k} against view {a}: {e}")
                    continue
                motions[k] = motions[a].compose(pair.motion)
                references[k], inlier_counts[k], icp_rms[k], overlap_rms[k] = a, pair.inliers, pair.icp_rms, pair.overlap_rms
                logger.info(f"Aligned view {k} to view {a}: {pair.inliers} inliers, {100 * pair.overlap:.0f}% overlap at RMS {pair.overlap_rms:.2e} m")
                progress = True
                break

    unplaced = [k for k in range(n) if motions[k] is None]
    if unplaced:
        k = unplaced[0]
        raise AlignmentFailureError(f"could not be placed ({failures.get(k, 'no candidate view')})", view=k)
    return AlignmentResult(motions, references, inlier_counts, icp_rms, overlap_rms)
