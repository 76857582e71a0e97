"""
rgbd-volume - volume of objects from sparse RGBD views.
Command-line entry point.
"""

import argparse
import sys
from pathlib import Path
from typing import Any

from pydantic import BaseModel, TypeAdapter

from geometry.registration import AlignmentResult
from geometry.volume import fit_ground_plane
from services.models import PipelineConfig, VolumeSummary, environment_defaults
from services.pipeline_service import PipelineService, stage, view_name
from services.synth_service import FIXTURES, SynthService
from storage.mesh_io import read_cloud_ply, read_mesh, read_ply_points, write_cloud_ply, write_mesh
from storage.text_io import format_plane, read_correspondences_csv, read_key_values, read_plane, read_pose, read_scene, write_plane, write_pose, write_scalar_field
from utils.errors import ConfigError, ParseError, ReconstructionError, StageError
from utils.logger import get_logger, setup_logging

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_UNRELIABLE = 4

# CLI flag -> configuration key
STAGE_FLAGS = {
    "seed": "seed",
    "threads": "threads",
    "strict": "strict",
    "mode": "mode",
    "ransac_iters": "ransac_iters",
    "inlier_thresh": "inlier_thresh",
    "icp_iters": "icp_iters",
    "icp_eps": "icp_eps",
    "min_overlap": "min_overlap",
    "max_overlap_rms": "max_overlap_rms",
    "voxel_thin": "voxel_thin",
    "grid_res": "grid_res",
    "screening_alpha": "screening_alpha",
    "cg_tol": "cg_tol",
    "cg_max_iters": "cg_max_iters",
    "iso_offset": "iso_offset",
    "no_mirror": "mirror_support",
    "no_clip": "clip_support",
    "no_plane": "detect_plane",
    "depth_format": "depth_format",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file with stage parameters")
    common.add_argument("--seed", type=int, help="seed for every randomized stage")
    common.add_argument("--threads", type=int, help="worker threads for per-view work")
    common.add_argument("--verbose", action="store_true", help="debug logging on stderr")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--strict", action="store_true", default=None, help="exit 4 when the volume is flagged unreliable")
    common.add_argument("--mode", choices=("features", "poses"), help="alignment from features or from the views' pose files")
    common.add_argument("--ransac-iters", type=int)
    common.add_argument("--inlier-thresh", type=float, help="RANSAC inlier distance in meters")
    common.add_argument("--icp-iters", type=int)
    common.add_argument("--icp-eps", type=float)
    common.add_argument("--min-overlap", type=float, help="fraction of a view that must land on the view it is aligned to")
    common.add_argument("--max-overlap-rms", type=float, help="largest accepted RMS distance over the overlap, in meters")
    common.add_argument("--voxel-thin", type=float, help="voxel size in meters for thinning the merged cloud")
    common.add_argument("--grid-res", type=int)
    common.add_argument("--screening-alpha", type=float)
    common.add_argument("--cg-tol", type=float)
    common.add_argument("--cg-max-iters", type=int)
    common.add_argument("--iso-offset", type=float, help="added to the mean sample value before extraction")
    common.add_argument("--no-mirror", action="store_false", default=None, help="do not mirror the object through the support plane")
    common.add_argument("--no-clip", action="store_false", default=None, help="keep the mesh below the support plane")
    common.add_argument("--no-plane", action="store_false", default=None, help="skip ground-plane detection")
    common.add_argument("--depth-format", choices=("pfm", "png"))

    parser = argparse.ArgumentParser(prog="rgbd-volume", description="Align RGBD views, reconstruct a surface and measure its volume.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic scan or write a fixture mesh")
    p.add_argument("output", type=Path, help="scan directory, or mesh file with --fixture")
    p.add_argument("--scene", type=Path, help="scene description file")
    p.add_argument("--fixture", choices=FIXTURES)
    p.add_argument("--size", type=float, default=0.1, help="fixture radius or side in meters")
    p.add_argument("--level", type=int, default=3, help="fixture subdivision")

    p = sub.add_parser("normals", parents=[common], help="oriented camera-frame cloud per view")
    p.add_argument("scan", type=Path)
    p.add_argument("output", type=Path, help="directory for cloud_NNN.ply")
    p.add_argument("--intrinsics", type=Path)

    p = sub.add_parser("align", parents=[common], help="estimate camera-to-world poses")
    p.add_argument("scan", type=Path)
    p.add_argument("output", type=Path, help="directory for pose_NNN.txt")
    p.add_argument("--intrinsics", type=Path)
    p.add_argument("--correspondences", type=Path, help="u0,v0,u1,v1 CSV between views 0 and 1, bypassing detection")

    p = sub.add_parser("merge", parents=[common], help="merge per-view clouds with their poses")
    p.add_argument("clouds", type=Path, help="directory with cloud_NNN.ply")
    p.add_argument("poses", type=Path, help="directory with pose_NNN.txt")
    p.add_argument("output", type=Path, help="merged PLY")

    p = sub.add_parser("plane", parents=[common], help="detect the ground plane of a cloud")
    p.add_argument("cloud", type=Path)
    p.add_argument("--output", type=Path, help="plane file to write")

    p = sub.add_parser("reconstruct", parents=[common], help="Poisson surface of an oriented cloud")
    p.add_argument("cloud", type=Path)
    p.add_argument("output", type=Path, help="mesh file (PLY or OBJ)")
    p.add_argument("--plane", type=Path, help="support plane; the mesh is then written in the support frame")
    p.add_argument("--dump-field", type=Path, help="prefix for a .raw/.hdr dump of the implicit function")

    p = sub.add_parser("volume", parents=[common], help="enclosed volume of a mesh")
    p.add_argument("mesh", type=Path)
    p.add_argument("--plane", type=Path, help="support plane in the mesh frame")
    p.add_argument("--aligned", action="store_true", help="the mesh is in the support frame already (support at z = 0)")
    p.add_argument("--cloud", type=Path, help="samples for the surface coverage diagnostic")
    p.add_argument("--grid-spacing", type=float, help="reconstruction spacing for the coverage distance")
    p.add_argument("--clip", action="store_true", help="cut below the support before integrating")

    p = sub.add_parser("pipeline", parents=[common], help="scan directory to mesh and volume report")
    p.add_argument("scan", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--intrinsics", type=Path)
    p.add_argument("--plane", type=Path, help="use this plane instead of detecting one")
    p.add_argument("--dump-field", action="store_true", default=None)
    return parser


def load_config(args: argparse.Namespace, *extra_layers: dict[str, Any]) -> PipelineConfig:
    """Model defaults < environment < --config file < extra layers < CLI flags."""
    layers = [environment_defaults()]
    if args.config is not None:
        layers.append(read_key_values(args.config))
    layers.extend(extra_layers)
    flags = {key: getattr(args, flag, None) for flag, key in STAGE_FLAGS.items()}
    for key in ("intrinsics", "plane"):
        if isinstance(getattr(args, key, None), Path):
            flags[key] = getattr(args, key)
    if args.command == "pipeline":
        flags["dump_field"] = args.dump_field
    layers.append(flags)
    return PipelineConfig.from_flat(*layers)


def emit(args: argparse.Namespace, text: str, payload: Any) -> None:
    if args.json:
        print(payload.model_dump_json(indent=2) if isinstance(payload, BaseModel) else TypeAdapter(Any).dump_json(payload, indent=2).decode())
    else:
        print(text, end="" if text.endswith("\n") else "\n")


def cmd_synth(args: argparse.Namespace) -> int:
    if args.fixture:
        with stage("synth"):
            volume = SynthService.write_fixture(args.fixture, args.output, args.size, args.level)
        emit(args, f"{args.fixture}: analytic volume {volume:.9g} m^3", {"fixture": args.fixture, "path": str(args.output), "volume_m3": volume})
        return EXIT_OK
    if args.scene is None:
        raise ConfigError("synth needs --scene or --fixture")
    scene_file = read_scene(args.scene)
    config = load_config(args, scene_file.settings)
    with stage("synth"):
        paths = SynthService.render_scan(scene_file, config, args.output)
    volume = scene_file.scene.total_volume()
    emit(args, f"{len(paths)} views written to {args.output}; analytic volume {volume:.9g} m^3", {"views": len(paths), "path": str(args.output), "volume_m3": volume})
    return EXIT_OK


def _load_scan(args: argparse.Namespace, config: PipelineConfig):
    config = config.model_copy(update={"input_dir": args.scan})
    intrinsics = PipelineService.load_intrinsics(config)
    views = PipelineService.load_views(args.scan, intrinsics, config.depth, config.threads)
    return intrinsics, views


def cmd_normals(args: argparse.Namespace) -> int:
    config = load_config(args)
    with stage("normals"):
        _, views = _load_scan(args, config)
        args.output.mkdir(parents=True, exist_ok=True)
        for view in views:
            write_cloud_ply(args.output / view_name("cloud", view.index, ".ply"), view.cloud)
    emit(args, "\n".join(f"view {v.index}: {len(v.cloud)} points" for v in views), {"points": [len(v.cloud) for v in views]})
    return EXIT_OK


def _alignment_text(result: AlignmentResult) -> str:
    lines = []
    for k, (motion, ref, count, fit) in enumerate(zip(result.motions, result.references, result.inlier_counts, result.overlap_rms, strict=True)):
        origin = "reference" if ref is None else f"to view {ref}, {count} inliers, overlap RMS {fit:.3e} m"
        t = motion.translation
        lines.append(f"view {k}: t = ({t[0]:.6f}, {t[1]:.6f}, {t[2]:.6f}) [{origin}]")
    return "\n".join(lines)


def cmd_align(args: argparse.Namespace) -> int:
    config = load_config(args)
    with stage("align"):
        intrinsics, views = _load_scan(args, config)
        injected = PipelineService.load_injected(args.scan, len(views))
        if args.correspondences is not None:
            injected[(0, 1)] = read_correspondences_csv(args.correspondences)
        result = PipelineService.align(views, intrinsics, config.registration, config.seed, injected)
        args.output.mkdir(parents=True, exist_ok=True)
        for view, motion in zip(views, result.motions, strict=True):
            write_pose(args.output / view_name("pose", view.index, ".txt"), motion)
    payload = {
        "poses": [m.as_matrix()[:3].tolist() for m in result.motions],
        "references": result.references,
        "inliers": result.inlier_counts,
        "icp_rms": result.icp_rms,
        "overlap_rms": result.overlap_rms,
    }
    emit(args, _alignment_text(result), payload)
    return EXIT_OK


def cmd_merge(args: argparse.Namespace) -> int:
    config = load_config(args)
    with stage("merge"):
        cloud_paths = sorted(args.clouds.glob("cloud_*.ply"))
        if not cloud_paths:
            raise ValueError(f"no cloud_NNN.ply files in {args.clouds}")
        clouds = [read_cloud_ply(p) for p in cloud_paths]
        motions = [read_pose(args.poses / p.name.replace("cloud_", "pose_").replace(".ply", ".txt")) for p in cloud_paths]
        merged = PipelineService.merge(clouds, motions, config.registration.voxel_thin)
        write_cloud_ply(args.output, merged)
    emit(args, f"{len(merged)} points written to {args.output}", {"points": len(merged), "path": str(args.output)})
    return EXIT_OK


def cmd_plane(args: argparse.Namespace) -> int:
    config = load_config(args)
    with stage("plane"):
        v = config.volume
        fit = fit_ground_plane(read_ply_points(args.cloud), v.plane_iters, v.plane_thresh, config.seed, v.min_plane_fraction)
        if args.output is not None:
            write_plane(args.output, fit.plane)
    emit(args, format_plane(fit.plane), {"normal": fit.plane.normal.tolist(), "offset": fit.plane.offset, "inliers": len(fit.inliers)})
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace) -> int:
    config = load_config(args)
    with stage("reconstruct"):
        cloud = read_cloud_ply(args.cloud)
        plane = read_plane(args.plane) if args.plane else None
        result = PipelineService.reconstruct(cloud, config.poisson, plane)
        write_mesh(args.output, result.mesh)
        if args.dump_field:
            write_scalar_field(args.dump_field, result.phi)
    payload = {
        "vertices": len(result.mesh.vertices),
        "faces": len(result.mesh.faces),
        "isovalue": result.isovalue,
        "grid_spacing_m": result.phi.grid.spacing,
        "cg_iterations": max(len(result.phi.residual_history) - 1, 0),
        "support_frame": result.supported,
    }
    emit(args, f"mesh: {payload['vertices']} vertices, {payload['faces']} faces (grid spacing {payload['grid_spacing_m']:.6g} m)", payload)
    return EXIT_OK


def cmd_volume(args: argparse.Namespace) -> int:
    config = load_config(args)
    with stage("volume"):
        mesh = read_mesh(args.mesh)
        plane = read_plane(args.plane) if args.plane else None
        samples = read_ply_points(args.cloud) if args.cloud else None
        distance = config.volume.coverage_cells * args.grid_spacing if args.grid_spacing else None
        summary: VolumeSummary = PipelineService.measure(mesh, config.volume, plane, args.aligned, samples, distance, args.clip)
    emit(args, summary.to_text(), summary)
    return _strict_exit(config, summary)


def cmd_pipeline(args: argparse.Namespace) -> int:
    config = load_config(args).model_copy(update={"input_dir": args.scan, "output_dir": args.output})
    report = PipelineService.run_pipeline(config)
    emit(args, report.to_text(), report)
    return _strict_exit(config, report.volume)


def _strict_exit(config: PipelineConfig, summary: VolumeSummary) -> int:
    if config.strict and not summary.reliable:
        reason = summary.warnings[0] if summary.warnings else "volume flagged unreliable"
        print(f"error[E_UNRELIABLE] volume: {reason}", file=sys.stderr)
        return EXIT_UNRELIABLE
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "normals": cmd_normals,
    "align": cmd_align,
    "merge": cmd_merge,
    "plane": cmd_plane,
    "reconstruct": cmd_reconstruct,
    "volume": cmd_volume,
    "pipeline": cmd_pipeline,
}


def _error_line(code: str, stage_name: str, message: str) -> None:
    print(f"error[{code}] {stage_name}: {' '.join(message.split())}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except StageError as e:
        input_error = isinstance(e.cause, ConfigError | ParseError | FileNotFoundError)
        code = "E_IO" if isinstance(e.cause, FileNotFoundError) else e.code
        _error_line(code, e.stage, str(e.cause))
        return EXIT_CONFIG if input_error else EXIT_STAGE
    except (ConfigError, ParseError) as e:
        _error_line(e.code, args.command, str(e))
        return EXIT_CONFIG
    except FileNotFoundError as e:
        _error_line("E_IO", args.command, str(e))
        return EXIT_CONFIG
    except (ReconstructionError, ValueError, RuntimeError, OSError) as e:
        _error_line(getattr(e, "code", "E_INTERNAL"), args.command, str(e))
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
