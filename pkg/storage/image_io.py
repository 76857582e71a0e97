"""
Depth and grayscale image files.

Depth comes as 16-bit PNG in millimeters (0 = no return) or as PFM in meters
(non-positive = no return). Grayscale images are 8-bit PNG.
"""

import re
from pathlib import Path

import numpy as np
from PIL import Image

from geometry.rgbd import DepthImage
from utils.errors import ParseError

MM_PER_M = 1000.0
PFM_HEADER = re.compile(rb"^(\d+)\s+(\d+)$")


def _read_pfm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ParseError(path, f"not a PFM file (header {kind[:8]!r})", 1)
        dims = PFM_HEADER.match(f.readline().strip())
        if not dims:
            raise ParseError(path, "malformed PFM dimensions", 2)
        width, height = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(f.readline().strip())
        except ValueError as e:
            raise ParseError(path, "malformed PFM scale", 3) from e
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != width * height * channels:
        raise ParseError(path, f"expected {width * height * channels} samples, found {data.size}")
    # PFM stores rows bottom to top
    image = np.flipud(data.reshape(height, width, channels))[..., 0]
    return image.astype(np.float64)


def _write_pfm(path: Path, image: np.ndarray) -> None:
    height, width = image.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(image).astype("<f4").tobytes())


def read_depth(path: str | Path) -> DepthImage:
    """
    Read a depth image as meters.

    Raises:
        ParseError: If the file is not a 16-bit grayscale PNG or a grayscale PFM
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        return DepthImage.from_array(_read_pfm(path))
    if suffix != ".png":
        raise ParseError(path, f"unsupported depth format {suffix or '(none)'}")
    try:
        with Image.open(path) as image:
            raw = np.array(image)
    except OSError as e:
        raise ParseError(path, f"unreadable PNG: {e}") from e
    if raw.ndim != 2:
        raise ParseError(path, f"depth PNG must be single-channel, got shape {raw.shape}")
    millimeters = raw.astype(np.float64)
    return DepthImage(millimeters / MM_PER_M, raw > 0)


def write_depth(path: str | Path, depth: DepthImage) -> None:
    """Write PFM (float meters) or 16-bit PNG (millimeters, rounded and clipped)."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        _write_pfm(path, np.where(depth.valid, depth.data, 0.0))
        return
    millimeters = np.clip(np.round(depth.data * MM_PER_M), 0, 65535).astype(np.uint16)
    millimeters[~depth.valid] = 0
    Image.fromarray(millimeters).save(path)


def read_gray(path: str | Path) -> np.ndarray:
    """Grayscale image as float in [0, 1]; color images are converted to luminance."""
    path = Path(path)
    try:
        with Image.open(path) as image:
            raw = np.array(image.convert("L") if image.mode not in ("L", "I;16") else image)
    except OSError as e:
        raise ParseError(path, f"unreadable image: {e}") from e
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return raw.astype(np.float64) / scale


def write_gray(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)).save(path)
