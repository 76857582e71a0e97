"""
Service layer for the reconstruction pipeline.

Each stage is a static method that reads its inputs, calls the numerical core and
returns plain results, so the CLI subcommands and run_pipeline share one code path.
"""

import re
import time
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from geometry.features import DetectorParams
from geometry.mesh import TriangleMesh
from geometry.motion import RigidMotion
from geometry.poisson import ScalarField, VoxelGrid, choose_isovalue, marching_cubes, solve_screened_poisson, splat_normals
from geometry.registration import AlignmentResult, AlignParams, View, align_views, merge_views
from geometry.rgbd import CameraIntrinsics, OrientedPointCloud, estimate_normals
from geometry.volume import FlowField, Plane, clip_below_support, complete_support, estimate_volume, fit_ground_plane, unsupported_area_fraction
from services.models import DepthConfig, PipelineConfig, PipelineReport, PoissonConfig, RegistrationConfig, ViewSummary, VolumeConfig, VolumeSummary
from storage.image_io import read_depth, read_gray
from storage.mesh_io import write_cloud_ply, write_mesh
from storage.text_io import read_correspondences_csv, read_intrinsics, read_plane, read_pose, read_scene, write_plane, write_pose, write_scalar_field
from utils.errors import NoPlaneError, ReconstructionError, StageError
from utils.logger import get_logger

logger = get_logger(__name__)

DEPTH_FILE = re.compile(r"^depth_(\d+)\.(pfm|png)$", re.IGNORECASE)
MATCH_FILE = re.compile(r"^matches_(\d+)_(\d+)\.csv$", re.IGNORECASE)
SUPPORT_PLANE = Plane(np.array([0.0, 0.0, 1.0]), 0.0)


@contextmanager
def stage(name: str, timings: dict[str, float] | None = None) -> Iterator[None]:
    """Time a stage and wrap its failure in a StageError naming it."""
    start = time.perf_counter()
    logger.info(f"Stage {name} started")
    try:
        yield
    except StageError:
        raise
    except (ReconstructionError, ValueError, RuntimeError, OSError) as e:
        logger.error(f"Stage {name} failed: {e}")
        raise StageError(name, e) from e
    finally:
        elapsed = time.perf_counter() - start
        if timings is not None:
            timings[name] = elapsed
        logger.debug(f"Stage {name} took {elapsed:.3f} s")


@dataclass
class Reconstruction:
    phi: ScalarField
    isovalue: float
    mesh: TriangleMesh
    samples: OrientedPointCloud
    supported: bool


def view_name(kind: str, index: int, suffix: str) -> str:
    return f"{kind}_{index:03d}{suffix}"


class PipelineService:
    """
    Stage operations of the scan-to-volume pipeline.
    """

    @staticmethod
    def load_intrinsics(config: PipelineConfig) -> CameraIntrinsics:
        path = config.intrinsics or (config.input_dir / "intrinsics.txt" if config.input_dir else None)
        if path is None:
            raise ValueError("no intrinsics file given and no input directory to look in")
        return read_intrinsics(path)

    @staticmethod
    def discover_views(input_dir: Path) -> list[tuple[int, Path]]:
        """
        Depth files of a scan directory, ordered by view index.

        Raises:
            ValueError: If the directory holds no depth files or a view index repeats
        """
        input_dir = Path(input_dir)
        if not input_dir.is_dir():
            raise ValueError(f"input directory does not exist: {input_dir}")
        found: dict[int, Path] = {}
        for path in sorted(input_dir.iterdir()):
            match = DEPTH_FILE.match(path.name)
            if not match:
                continue
            index = int(match.group(1))
            if index in found:
                raise ValueError(f"view {index} has more than one depth file: {found[index].name}, {path.name}")
            found[index] = path
        if not found:
            raise ValueError(f"no depth_NNN.pfm or depth_NNN.png files in {input_dir}")
        return sorted(found.items())

    @staticmethod
    def load_view(position: int, index: int, depth_path: Path, intrinsics: CameraIntrinsics, depth_config: DepthConfig) -> View:
        """Read one view's depth, optional image and pose, and estimate its oriented cloud."""
        directory = depth_path.parent
        depth = read_depth(depth_path)
        image_path = directory / view_name("image", index, ".png")
        image = read_gray(image_path) if image_path.is_file() else None
        pose_path = directory / view_name("pose", index, ".txt")
        pose = read_pose(pose_path) if pose_path.is_file() else None
        cloud = estimate_normals(depth, intrinsics, depth_config.jump_threshold, depth_config.perspective_correction, depth_config.depth_smoothing, image)
        logger.debug(f"Loaded view {index}: {depth.valid_count()} valid pixels, {len(cloud)} oriented points")
        return View(position, depth, cloud, image, pose)

    @staticmethod
    def load_views(input_dir: Path, intrinsics: CameraIntrinsics, depth_config: DepthConfig, threads: int = 1) -> list[View]:
        """
        Load every view of a scan directory; views keep their on-disk order.

        Views are re-indexed 0..n-1 in that order.
        """
        entries = PipelineService.discover_views(input_dir)
        with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
            views = list(executor.map(lambda item: PipelineService.load_view(item[0], item[1][0], item[1][1], intrinsics, depth_config), enumerate(entries)))
        logger.info(f"Loaded {len(views)} views from {input_dir}")
        return views

    @staticmethod
    def load_injected(input_dir: Path, view_count: int) -> dict[tuple[int, int], np.ndarray]:
        """Pixel correspondences from matches_AAA_KKK.csv files, keyed by (target, source)."""
        injected = {}
        for path in sorted(Path(input_dir).glob("matches_*.csv")):
            match = MATCH_FILE.match(path.name)
            if not match:
                continue
            a, k = int(match.group(1)), int(match.group(2))
            if a >= view_count or k >= view_count:
                logger.warning(f"Ignoring {path.name}: only {view_count} views")
                continue
            injected[(a, k)] = read_correspondences_csv(path)
        if injected:
            logger.info(f"Using injected correspondences for {len(injected)} view pair(s)")
        return injected

    @staticmethod
    def align_params(config: RegistrationConfig, seed: int) -> AlignParams:
        return AlignParams(
            mode=config.mode,
            ransac_iterations=config.ransac_iters,
            inlier_threshold=config.inlier_thresh,
            icp_iterations=config.icp_iters,
            icp_eps=config.icp_eps,
            icp_max_points=config.icp_max_points,
            icp_max_distance=config.icp_max_distance,
            min_overlap=config.min_overlap,
            max_overlap_rms=config.max_overlap_rms,
            max_match_distance=config.max_match_distance,
            min_matches=config.min_matches,
            seed=seed,
            detector=DetectorParams(config.octaves, config.scales_per_octave, config.contrast_threshold, config.edge_ratio),
        )

    @staticmethod
    def align(views: list[View], intrinsics: CameraIntrinsics, config: RegistrationConfig, seed: int, injected: dict | None = None) -> AlignmentResult:
        return align_views(views, intrinsics, PipelineService.align_params(config, seed), injected)

    @staticmethod
    def merge(clouds: list[OrientedPointCloud], motions: list[RigidMotion], voxel_size: float = 0.0) -> OrientedPointCloud:
        merged = merge_views(list(zip(clouds, motions, strict=True)), voxel_size or None)
        logger.info(f"Merged cloud: {len(merged)} points")
        return merged

    @staticmethod
    def detect_plane(cloud: OrientedPointCloud, config: VolumeConfig, seed: int) -> Plane | None:
        """
        Ground plane of the merged cloud, or None when detection is disabled or finds nothing.
        """
        if not config.detect_plane:
            return None
        try:
            return fit_ground_plane(cloud.points, config.plane_iters, config.plane_thresh, seed, config.min_plane_fraction).plane
        except NoPlaneError as e:
            logger.warning(f"No support plane found ({e}); the mesh is integrated as closed")
            return None

    @staticmethod
    def reconstruct(cloud: OrientedPointCloud, config: PoissonConfig, plane: Plane | None = None) -> Reconstruction:
        """
        Poisson surface of a cloud, in the support frame when a plane is given.

        With a plane the cloud is cropped above it (and mirrored through it when
        ``mirror_support``), and the extracted mesh is cut at the support when
        ``clip_support``.
        """
        samples = cloud
        if plane is not None:
            samples, _ = complete_support(cloud, plane, config.crop_margin, config.mirror_support)
        grid = VoxelGrid.for_cloud(samples, config.grid_res)
        logger.info(f"Poisson grid {grid.dims} at {grid.spacing:.4g} m for {len(samples)} samples")
        field = splat_normals(samples, grid)
        phi = solve_screened_poisson(field, samples, config.screening_alpha, config.cg_tol, config.cg_max_iters)
        isovalue = choose_isovalue(phi, samples) + config.iso_offset
        mesh = marching_cubes(phi, isovalue, config.interior)
        if plane is not None and config.clip_support:
            mesh = clip_below_support(mesh)
        return Reconstruction(phi, isovalue, mesh, samples, plane is not None)

    @staticmethod
    def measure(
        mesh: TriangleMesh,
        config: VolumeConfig,
        plane: Plane | None = None,
        aligned: bool = False,
        samples: np.ndarray | None = None,
        coverage_distance: float | None = None,
        clip: bool = False,
    ) -> VolumeSummary:
        """
        Volume of a mesh with its diagnostics.

        Args:
            mesh: Outward-wound mesh
            config: Volume options
            plane: Support plane in the mesh's frame
            aligned: The mesh is already in the support frame (support at z = 0)
            samples: Reconstruction samples for the coverage diagnostic
            coverage_distance: Distance beyond which a face counts as unsupported
            clip: Cut below the support before integrating
        """
        support = SUPPORT_PLANE if aligned else plane
        report = estimate_volume(mesh, support, config.gap_tolerance, FlowField[config.flow.upper()], clip and not aligned)
        summary = VolumeSummary(**report.as_dict())
        if samples is not None and coverage_distance is not None:
            unsupported = unsupported_area_fraction(mesh, samples, coverage_distance)
            summary.unsupported_fraction = unsupported
            if unsupported > config.max_unsupported_fraction:
                message = f"{100 * unsupported:.1f}% of the surface is farther than {coverage_distance:.4g} m from any sample"
                logger.warning(message)
                summary.warnings.append(message)
                summary.reliable = False
        logger.info(f"Volume {summary.volume_m3:.6g} m^3 ({summary.volume_cm3:.4g} cm^3), reliable: {summary.reliable}")
        return summary

    @staticmethod
    def flag_alignment(summary: VolumeSummary, alignment: AlignmentResult, config: RegistrationConfig) -> VolumeSummary:
        """Mark the volume unreliable when an aligned view fits its reference more loosely than the RANSAC inlier distance."""
        for k, (reference, fit) in enumerate(zip(alignment.references, alignment.overlap_rms, strict=True)):
            if reference is None or fit is None or fit <= config.inlier_thresh:
                continue
            message = f"view {k} fits view {reference} at RMS {fit:.3g} m, looser than the {config.inlier_thresh:.3g} m inlier distance"
            logger.warning(message)
            summary.warnings.append(message)
            summary.reliable = False
        return summary

    @staticmethod
    def reference_volume(input_dir: Path | None) -> float | None:
        if input_dir is None or not (Path(input_dir) / "scene.txt").is_file():
            return None
        return read_scene(Path(input_dir) / "scene.txt").scene.total_volume()

    @staticmethod
    def run_pipeline(config: PipelineConfig) -> PipelineReport:
        """
        Run load, normals, alignment, merge, plane detection, reconstruction and volume.

        Writes cloud.ply, mesh.ply (support frame), plane.txt, pose_NNN.txt and the
        report files to the output directory.

        Raises:
            StageError: Naming the stage that failed
        """
        if config.input_dir is None or config.output_dir is None:
            raise StageError("config", ValueError("pipeline needs an input and an output directory"))
        timings: dict[str, float] = {}
        output_dir = Path(config.output_dir)

        with stage("load", timings):
            output_dir.mkdir(parents=True, exist_ok=True)
            intrinsics = PipelineService.load_intrinsics(config)
            views = PipelineService.load_views(config.input_dir, intrinsics, config.depth, config.threads)
            injected = PipelineService.load_injected(config.input_dir, len(views))
            if config.registration.mode == "features" and any(v.image is None for v in views) and len(injected) < len(views) - 1:
                logger.warning("Some views have no image; feature alignment can only use injected correspondences for them")

        with stage("align", timings):
            alignment = PipelineService.align(views, intrinsics, config.registration, config.seed, injected)
            for view, motion in zip(views, alignment.motions, strict=True):
                write_pose(output_dir / view_name("pose", view.index, ".txt"), motion)

        with stage("merge", timings):
            merged = PipelineService.merge([v.cloud for v in views], alignment.motions, config.registration.voxel_thin)
            write_cloud_ply(output_dir / "cloud.ply", merged)

        with stage("plane", timings):
            plane = read_plane(config.plane) if config.plane else PipelineService.detect_plane(merged, config.volume, config.seed)
            if plane is not None:
                write_plane(output_dir / "plane.txt", plane)
                # later stages see the plane exactly as a staged run reads it back
                plane = read_plane(output_dir / "plane.txt")

        with stage("reconstruct", timings):
            result = PipelineService.reconstruct(merged, config.poisson, plane)
            write_mesh(output_dir / "mesh.ply", result.mesh)
            if config.dump_field:
                write_scalar_field(output_dir / "phi", result.phi)

        with stage("volume", timings):
            summary = PipelineService.measure(
                result.mesh,
                config.volume,
                aligned=result.supported,
                samples=result.samples.points,
                coverage_distance=config.volume.coverage_cells * result.phi.grid.spacing,
            )
            PipelineService.flag_alignment(summary, alignment, config.registration)
            reference = PipelineService.reference_volume(config.input_dir)

        placements = ["pose" if config.registration.mode == "poses" else ("reference" if r is None else "aligned") for r in alignment.references]
        report = PipelineReport(
            views=[
                ViewSummary(index=v.index, points=len(v.cloud), placement=p, reference=r, inliers=n, icp_rms=rms, overlap_rms=fit)
                for v, p, r, n, rms, fit in zip(views, placements, alignment.references, alignment.inlier_counts, alignment.icp_rms, alignment.overlap_rms, strict=True)
            ],
            cloud_points=len(merged),
            plane=None if plane is None else [*map(float, plane.normal), plane.offset],
            reconstruction_points=len(result.samples),
            grid_dims=list(result.phi.grid.dims),
            grid_spacing_m=result.phi.grid.spacing,
            cg_iterations=max(len(result.phi.residual_history) - 1, 0),
            cg_residual=result.phi.residual_history[-1] if result.phi.residual_history else 0.0,
            isovalue=result.isovalue,
            mesh_vertices=len(result.mesh.vertices),
            mesh_faces=len(result.mesh.faces),
            volume=summary,
            reference_volume_m3=reference,
            relative_error_percent=None if not reference else 100.0 * (summary.volume_m3 - reference) / reference,
            timings_s=timings,
        )
        (output_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
        (output_dir / "report.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"Pipeline finished in {sum(timings.values()):.2f} s; results in {output_dir}")
        return report
