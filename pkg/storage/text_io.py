"""
Plain-text inputs and outputs: intrinsics, poses, planes, correspondences, scene
descriptions and scalar-field dumps.

Key-value files (intrinsics, scenes, pipeline configs) share the ``key = value``
grammar of dotenv files, with ``#`` comments.
"""

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from dotenv import dotenv_values

from geometry.motion import RigidMotion
from geometry.poisson import ScalarField, VoxelGrid
from geometry.rgbd import CameraIntrinsics
from geometry.synth import Primitive, Scene
from geometry.volume import Plane
from utils.errors import ParseError
from utils.logger import get_logger

logger = get_logger(__name__)

INTRINSIC_KEYS = ("fu", "fv", "cu", "cv")
PRIMITIVE_KEY = re.compile(r"^primitive(_\w+)?$")


def _line_of(path: Path, key: str) -> int | None:
    pattern = re.compile(rf"^\s*(export\s+)?{re.escape(key)}\s*=")
    try:
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if pattern.match(line):
                    return line_no
    except OSError:
        return None
    return None


def read_key_values(path: str | Path) -> dict[str, str]:
    """
    Read a ``key = value`` file into a dict of stripped strings.

    Raises:
        FileNotFoundError: If the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    values = dotenv_values(path)
    return {k.strip().lower(): (v or "").strip() for k, v in values.items()}


def _floats(path: Path, key: str, text: str, count: int | None = None) -> list[float]:
    try:
        numbers = [float(p) for p in text.split()]
    except ValueError as e:
        raise ParseError(path, f"{key}: expected numbers, got {text!r}", _line_of(path, key)) from e
    if count is not None and len(numbers) != count:
        raise ParseError(path, f"{key}: expected {count} numbers, got {len(numbers)}", _line_of(path, key))
    if not all(math.isfinite(x) for x in numbers):
        raise ParseError(path, f"{key}: non-finite value in {text!r}", _line_of(path, key))
    return numbers


def _number(x) -> str:
    """Shortest text that reads back to the same double, for numpy scalars too."""
    return repr(float(x))


def intrinsics_from_values(values: dict[str, str], path: Path) -> CameraIntrinsics:
    missing = [k for k in INTRINSIC_KEYS if k not in values]
    if missing:
        raise ParseError(path, f"missing intrinsics key(s): {', '.join(missing)}")
    fu, fv, cu, cv = (_floats(path, k, values[k], 1)[0] for k in INTRINSIC_KEYS)
    size = {}
    for key in ("width", "height"):
        if key in values:
            number = _floats(path, key, values[key], 1)[0]
            if number != int(number) or number <= 0:
                raise ParseError(path, f"{key} must be a positive integer", _line_of(path, key))
            size[key] = int(number)
    try:
        return CameraIntrinsics(fu, fv, cu, cv, **size)
    except ValueError as e:
        raise ParseError(path, str(e)) from e


def read_intrinsics(path: str | Path) -> CameraIntrinsics:
    """Read ``fu fv cu cv`` (and optionally ``width height``) from a key-value file."""
    path = Path(path)
    return intrinsics_from_values(read_key_values(path), path)


def write_intrinsics(path: str | Path, intrinsics: CameraIntrinsics) -> None:
    lines = [f"{key} = {_number(getattr(intrinsics, key))}" for key in INTRINSIC_KEYS]
    if intrinsics.width is not None and intrinsics.height is not None:
        lines += [f"width = {intrinsics.width}", f"height = {intrinsics.height}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _numeric_rows(path: Path) -> list[tuple[int, list[float]]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                rows.append((line_no, [float(p) for p in text.replace(",", " ").split()]))
            except ValueError as e:
                raise ParseError(path, f"expected numbers, got {text!r}", line_no) from e
    return rows


def read_pose(path: str | Path) -> RigidMotion:
    """
    Read a camera-to-world pose as three rows ``r r r t`` (a fourth ``0 0 0 1`` row is allowed).

    The rotation is projected onto SO(3) so that poses written with limited precision load.
    """
    path = Path(path)
    rows = _numeric_rows(path)
    if len(rows) not in (3, 4):
        raise ParseError(path, f"expected 3 or 4 rows, got {len(rows)}")
    for line_no, row in rows:
        if len(row) != 4:
            raise ParseError(path, f"expected 4 numbers per row, got {len(row)}", line_no)
    matrix = np.array([row for _, row in rows])
    try:
        return RigidMotion.from_matrix(matrix, orthonormalize=True)
    except ValueError as e:
        raise ParseError(path, str(e)) from e


def write_pose(path: str | Path, motion: RigidMotion) -> None:
    matrix = motion.as_matrix()[:3]
    Path(path).write_text("\n".join(" ".join(_number(x) for x in row) for row in matrix) + "\n", encoding="utf-8")


def read_plane(path: str | Path) -> Plane:
    """Read ``nx ny nz d``; the normal is normalized and d scaled to match."""
    path = Path(path)
    rows = _numeric_rows(path)
    if len(rows) != 1 or len(rows[0][1]) != 4:
        raise ParseError(path, "expected a single line 'nx ny nz d'", rows[0][0] if rows else None)
    nx, ny, nz, d = rows[0][1]
    norm = math.sqrt(nx * nx + ny * ny + nz * nz)
    if norm == 0:
        raise ParseError(path, "plane normal is zero", rows[0][0])
    return Plane(np.array([nx, ny, nz]) / norm, d / norm)


def format_plane(plane: Plane) -> str:
    return " ".join(f"{x:.9g}" for x in (*plane.normal, plane.offset))


def write_plane(path: str | Path, plane: Plane) -> None:
    Path(path).write_text(" ".join(_number(x) for x in (*plane.normal, plane.offset)) + "\n", encoding="utf-8")


def read_correspondences_csv(path: str | Path) -> np.ndarray:
    """
    Read pixel correspondences ``u0,v0,u1,v1`` as an (N,4) array.

    A header row naming the columns is skipped.
    """
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = [p.strip() for p in text.split(",")]
            if line_no == 1 and parts and not _is_number(parts[0]):
                continue
            if len(parts) != 4:
                raise ParseError(path, f"expected 4 columns u0,v0,u1,v1, got {len(parts)}", line_no)
            try:
                out.append([float(p) for p in parts])
            except ValueError as e:
                raise ParseError(path, f"non-numeric column in {text!r}", line_no) from e
    return np.asarray(out, dtype=np.float64).reshape(-1, 4)


def write_correspondences_csv(path: str | Path, pixels: np.ndarray) -> None:
    lines = ["u0,v0,u1,v1"] + [",".join(_number(x) for x in row) for row in np.asarray(pixels, dtype=np.float64).reshape(-1, 4)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def euler_motion(rotation_deg, translation) -> RigidMotion:
    """Extrinsic x, then y, then z rotations in degrees, followed by a translation."""
    rx, ry, rz = (math.radians(a) for a in rotation_deg)
    motion = RigidMotion.identity()
    for axis, angle in (((1, 0, 0), rx), ((0, 1, 0), ry), ((0, 0, 1), rz)):
        if angle:
            motion = RigidMotion.from_axis_angle(axis, angle).compose(motion)
    return RigidMotion(motion.rotation, translation)


@dataclass
class SceneFile:
    """Parsed scene description; ``settings`` holds every key that is not part of the scene itself."""

    scene: Scene
    settings: dict[str, str] = field(default_factory=dict)
    text: str = ""


def _parse_primitive(path: Path, key: str, text: str) -> Primitive:
    # kind sizes... | tx ty tz | rx ry rz
    sections = [s.strip() for s in text.split("|")]
    head = sections[0].split()
    if not head:
        raise ParseError(path, f"{key}: empty primitive", _line_of(path, key))
    kind = head[0].lower()
    sizes = _floats(path, key, " ".join(head[1:]))
    translation = _floats(path, key, sections[1], 3) if len(sections) > 1 else [0.0, 0.0, 0.0]
    rotation = _floats(path, key, sections[2], 3) if len(sections) > 2 else [0.0, 0.0, 0.0]
    if len(sections) > 3:
        raise ParseError(path, f"{key}: expected at most 3 '|'-separated sections", _line_of(path, key))
    try:
        return Primitive(kind, tuple(sizes), euler_motion(rotation, translation))
    except ValueError as e:
        raise ParseError(path, f"{key}: {e}", _line_of(path, key)) from e


def read_scene(path: str | Path) -> SceneFile:
    """
    Read a scene description.

    Primitive keys look like ``primitive_1 = box 0.1 0.1 0.126 | 0 0 0.063 | 0 0 0``
    (kind and sizes, then translation, then x/y/z rotation in degrees). Scene-level keys
    are ``ground_plane = nx ny nz d`` (or ``none``), ``texture``, ``texture_scale`` and ``seed``.

    Raises:
        ParseError: On malformed entries, naming the line
    """
    path = Path(path)
    values = read_key_values(path)
    primitive_keys = sorted((k for k in values if PRIMITIVE_KEY.match(k)), key=lambda k: (len(k), k))
    if not primitive_keys:
        raise ParseError(path, "scene has no primitive_* entries")
    primitives = [_parse_primitive(path, k, values[k]) for k in primitive_keys]

    ground_plane = None
    ground = values.get("ground_plane", "0 0 1 0")
    if ground.lower() != "none":
        nx, ny, nz, d = _floats(path, "ground_plane", ground, 4)
        norm = math.sqrt(nx * nx + ny * ny + nz * nz)
        if norm == 0:
            raise ParseError(path, "ground_plane normal is zero", _line_of(path, "ground_plane"))
        ground_plane = Plane(np.array([nx, ny, nz]) / norm, d / norm)

    scene_kwargs = {}
    if "texture" in values:
        scene_kwargs["texture"] = values["texture"].lower()
    if "texture_scale" in values:
        scene_kwargs["texture_scale"] = _floats(path, "texture_scale", values["texture_scale"], 1)[0]
    if "seed" in values:
        scene_kwargs["seed"] = int(_floats(path, "seed", values["seed"], 1)[0])
    try:
        scene = Scene(tuple(primitives), ground_plane, **scene_kwargs)
    except ValueError as e:
        raise ParseError(path, str(e)) from e

    scene_keys = set(primitive_keys) | {"ground_plane", "texture", "texture_scale"}
    settings = {k: v for k, v in values.items() if k not in scene_keys}
    logger.debug(f"Read scene {path} with {len(primitives)} primitive(s)")
    return SceneFile(scene, settings, path.read_text(encoding="utf-8"))


def write_scalar_field(prefix: str | Path, phi: ScalarField) -> tuple[Path, Path]:
    """
    Dump a field as ``<prefix>.raw`` (little-endian float32, x slowest) plus a ``<prefix>.hdr`` header.
    """
    prefix = Path(prefix)
    raw, hdr = prefix.with_suffix(".raw"), prefix.with_suffix(".hdr")
    np.ascontiguousarray(phi.values, dtype="<f4").tofile(raw)
    grid = phi.grid
    header = [
        f"dims = {' '.join(str(n) for n in grid.node_shape)}",
        f"origin = {' '.join(_number(x) for x in grid.origin)}",
        f"spacing = {_number(grid.spacing)}",
        "type = float32-le",
        "order = C",
    ]
    hdr.write_text("\n".join(header) + "\n", encoding="utf-8")
    return raw, hdr


def read_scalar_field(prefix: str | Path) -> ScalarField:
    prefix = Path(prefix)
    hdr = prefix.with_suffix(".hdr")
    values = read_key_values(hdr)
    try:
        dims = tuple(int(x) for x in _floats(hdr, "dims", values["dims"], 3))
        origin = _floats(hdr, "origin", values["origin"], 3)
        spacing = _floats(hdr, "spacing", values["spacing"], 1)[0]
    except KeyError as e:
        raise ParseError(hdr, f"missing header key {e.args[0]}") from e
    data = np.fromfile(prefix.with_suffix(".raw"), dtype="<f4")
    if data.size != math.prod(dims):
        raise ParseError(prefix.with_suffix(".raw"), f"expected {math.prod(dims)} samples, found {data.size}")
    grid = VoxelGrid(np.asarray(origin), spacing, tuple(n - 1 for n in dims))
    return ScalarField(grid, data.astype(np.float64).reshape(dims))
