"""
Service layer for synthetic scans and fixture meshes.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from geometry.mesh import TriangleMesh
from geometry.rgbd import CameraIntrinsics
from geometry.synth import box_mesh, camera_ring, corrupt_depth, icosphere, render_depth
from services.models import PipelineConfig, SynthConfig
from services.pipeline_service import view_name
from storage.image_io import write_depth, write_gray
from storage.mesh_io import write_mesh
from storage.text_io import SceneFile, write_intrinsics, write_pose
from utils.logger import get_logger

logger = get_logger(__name__)

FIXTURES = ("icosphere", "box", "open-box")


class SynthService:
    """
    Renders scan directories from scene files and writes analytic fixture meshes.
    """

    @staticmethod
    def intrinsics(config: SynthConfig) -> CameraIntrinsics:
        cu = config.cu if config.cu is not None else (config.width - 1) / 2
        cv = config.cv if config.cv is not None else (config.height - 1) / 2
        return CameraIntrinsics(config.fu, config.fv, cu, cv, config.width, config.height)

    @staticmethod
    def render_scan(scene_file: SceneFile, config: PipelineConfig, output_dir: Path) -> list[Path]:
        """
        Render a camera ring around the scene into a scan directory.

        Writes depth_NNN (PFM or PNG), image_NNN.png, pose_NNN.txt, intrinsics.txt and a
        copy of the scene as scene.txt. View k's noise is seeded with seed + k.

        Args:
            scene_file: Parsed scene description
            config: Pipeline config; its synth and depth sections drive the rendering
            output_dir: Destination directory, created when missing

        Returns:
            Paths of the depth files in view order
        """
        synth = config.synth
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        intrinsics = SynthService.intrinsics(synth)
        size = (synth.width, synth.height)
        poses = camera_ring(synth.ring_count, synth.ring_radius, synth.ring_elevation, synth.ring_target)
        suffix = "." + config.depth.depth_format

        def render(k: int) -> Path:
            depth, gray = render_depth(scene_file.scene, poses[k], intrinsics, size)
            if synth.noise_sigma > 0 or synth.outlier_fraction > 0:
                depth = corrupt_depth(depth, synth.noise_sigma, synth.outlier_fraction, config.seed + k)
            if depth.valid_count() == 0:
                logger.warning(f"View {k} sees nothing")
            path = output_dir / view_name("depth", k, suffix)
            write_depth(path, depth)
            write_gray(output_dir / view_name("image", k, ".png"), gray)
            write_pose(output_dir / view_name("pose", k, ".txt"), poses[k])
            return path

        with ThreadPoolExecutor(max_workers=max(1, config.threads)) as executor:
            paths = list(executor.map(render, range(len(poses))))
        write_intrinsics(output_dir / "intrinsics.txt", intrinsics)
        (output_dir / "scene.txt").write_text(scene_file.text, encoding="utf-8")
        logger.info(f"Rendered {len(paths)} views to {output_dir}; analytic volume {scene_file.scene.total_volume():.6g} m^3")
        return paths

    @staticmethod
    def fixture(kind: str, size: float = 0.1, level: int = 3) -> tuple[TriangleMesh, float]:
        """
        Analytic fixture mesh and its exact enclosed volume.

        ``icosphere`` has radius ``size``; ``box`` and ``open-box`` are cubes of side
        ``size`` resting on z = 0, the open one without its bottom. ``level`` is the
        subdivision level (sphere) or quads per side edge (boxes).
        """
        if kind == "icosphere":
            return icosphere(size, level), 4.0 / 3.0 * math.pi * size**3
        if kind in ("box", "open-box"):
            open_faces = ("-z",) if kind == "open-box" else ()
            mesh = box_mesh((-size / 2, -size / 2, 0.0), (size / 2, size / 2, size), max(1, level), open_faces=open_faces)
            return mesh, size**3
        raise ValueError(f"unknown fixture {kind}; expected one of {FIXTURES}")

    @staticmethod
    def write_fixture(kind: str, path: Path, size: float = 0.1, level: int = 3) -> float:
        mesh, volume = SynthService.fixture(kind, size, level)
        write_mesh(path, mesh)
        logger.info(f"Wrote {kind} fixture to {path}: {len(mesh.faces)} faces, volume {volume:.6g} m^3")
        return volume
