"""
Difference-of-Gaussians keypoints with gradient-histogram descriptors.

A self-contained SIFT-like detector: scale-space extrema of a DoG pyramid,
one-step sub-pixel refinement, contrast and edge rejection, a dominant
orientation per keypoint and a 4x4x8 orientation-histogram descriptor.
Matching is brute-force mutual nearest neighbors.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from utils.logger import get_logger

logger = get_logger(__name__)

SIGMA0 = 1.6
ASSUMED_BLUR = 0.5
BORDER = 5
ORIENTATION_BINS = 36
DESCRIPTOR_WIDTH = 4
DESCRIPTOR_BINS = 8
DESCRIPTOR_CLIP = 0.2


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    scale: float
    orientation: float
    response: float
    octave: int


@dataclass(frozen=True)
class DetectorParams:
    octaves: int = 4
    scales_per_octave: int = 3
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0


def _as_float_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float64) / float(np.iinfo(image.dtype).max)
    return image.astype(np.float64)


def _gaussian_octave(base: np.ndarray, scales: int) -> list[np.ndarray]:
    """Blur ``base`` (already at SIGMA0) incrementally to scales + 3 levels."""
    k = 2.0 ** (1.0 / scales)
    levels = [base]
    for s in range(1, scales + 3):
        prev_sigma = SIGMA0 * k ** (s - 1)
        sigma = SIGMA0 * k**s
        levels.append(ndimage.gaussian_filter(levels[-1], np.sqrt(sigma**2 - prev_sigma**2)))
    return levels


def _build_pyramid(image: np.ndarray, params: DetectorParams) -> list[list[np.ndarray]]:
    base = ndimage.gaussian_filter(image, np.sqrt(SIGMA0**2 - ASSUMED_BLUR**2))
    pyramid = []
    for octave in range(params.octaves):
        if min(base.shape) < 2 * BORDER + 3:
            break
        levels = _gaussian_octave(base, params.scales_per_octave)
        pyramid.append(levels)
        # level S has twice the base blur; subsample it for the next octave
        base = levels[params.scales_per_octave][::2, ::2]
        logger.debug(f"octave {octave}: {levels[0].shape[1]}x{levels[0].shape[0]}")
    return pyramid


def _find_extrema(dog: np.ndarray, params: DetectorParams) -> np.ndarray:
    """Return (scale, row, col) indices of 3x3x3 extrema passing the prefilter."""
    threshold = 0.5 * params.contrast_threshold / params.scales_per_octave
    maxima = ndimage.maximum_filter(dog, size=3, mode="nearest")
    minima = ndimage.minimum_filter(dog, size=3, mode="nearest")
    candidate = (np.abs(dog) > threshold) & ((dog == maxima) | (dog == minima))
    candidate[0] = False
    candidate[-1] = False
    candidate[:, :BORDER, :] = False
    candidate[:, -BORDER:, :] = False
    candidate[:, :, :BORDER] = False
    candidate[:, :, -BORDER:] = False
    return np.argwhere(candidate)


def _refine(dog: np.ndarray, idx: np.ndarray, params: DetectorParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    One Newton step on the quadratic fit of the DoG around each candidate.

    Returns:
        Tuple of (kept mask, sub-sample offsets in (s, y, x), interpolated response)
    """
    s, y, x = idx[:, 0], idx[:, 1], idx[:, 2]

    def at(ds: int, dy: int, dx: int) -> np.ndarray:
        return dog[s + ds, y + dy, x + dx]

    center = at(0, 0, 0)
    grad = 0.5 * np.column_stack([at(1, 0, 0) - at(-1, 0, 0), at(0, 1, 0) - at(0, -1, 0), at(0, 0, 1) - at(0, 0, -1)])
    dss = at(1, 0, 0) + at(-1, 0, 0) - 2 * center
    dyy = at(0, 1, 0) + at(0, -1, 0) - 2 * center
    dxx = at(0, 0, 1) + at(0, 0, -1) - 2 * center
    dsy = 0.25 * (at(1, 1, 0) - at(1, -1, 0) - at(-1, 1, 0) + at(-1, -1, 0))
    dsx = 0.25 * (at(1, 0, 1) - at(1, 0, -1) - at(-1, 0, 1) + at(-1, 0, -1))
    dyx = 0.25 * (at(0, 1, 1) - at(0, 1, -1) - at(0, -1, 1) + at(0, -1, -1))
    hessian = np.stack([np.column_stack([dss, dsy, dsx]), np.column_stack([dsy, dyy, dyx]), np.column_stack([dsx, dyx, dxx])], axis=1)

    det = np.linalg.det(hessian)
    solvable = np.abs(det) > 1e-12
    offsets = np.zeros_like(grad)
    if np.any(solvable):
        offsets[solvable] = -np.linalg.solve(hessian[solvable], grad[solvable][..., None])[..., 0]
    response = center + 0.5 * np.einsum("ij,ij->i", grad, offsets)

    trace = dxx + dyy
    det_xy = dxx * dyy - dyx**2
    r = params.edge_ratio
    not_edge = (det_xy > 0) & (trace**2 * r < (r + 1) ** 2 * det_xy)
    contrast = np.abs(response) >= params.contrast_threshold / params.scales_per_octave
    stable = np.all(np.abs(offsets) <= 1.0, axis=1)
    return solvable & not_edge & contrast & stable, offsets, response


def _gradients(level: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(level)
    return np.hypot(gx, gy), np.arctan2(gy, gx)


def _dominant_orientation(magnitude: np.ndarray, angle: np.ndarray, row: float, col: float, sigma: float) -> float:
    radius = int(round(3.0 * 1.5 * sigma))
    r0, c0 = int(round(row)), int(round(col))
    rows = slice(max(r0 - radius, 1), min(r0 + radius + 1, magnitude.shape[0] - 1))
    cols = slice(max(c0 - radius, 1), min(c0 + radius + 1, magnitude.shape[1] - 1))
    yy, xx = np.mgrid[rows, cols]
    weight = np.exp(-((yy - row) ** 2 + (xx - col) ** 2) / (2.0 * (1.5 * sigma) ** 2))
    bins = np.floor((angle[rows, cols] % (2 * np.pi)) / (2 * np.pi) * ORIENTATION_BINS).astype(int) % ORIENTATION_BINS
    hist = np.bincount(bins.ravel(), weights=(weight * magnitude[rows, cols]).ravel(), minlength=ORIENTATION_BINS)
    hist = np.convolve(np.concatenate([hist[-2:], hist, hist[:2]]), np.array([1, 4, 6, 4, 1]) / 16.0, mode="valid")
    peak = int(np.argmax(hist))
    left, right = hist[(peak - 1) % ORIENTATION_BINS], hist[(peak + 1) % ORIENTATION_BINS]
    denom = left - 2 * hist[peak] + right
    shift = 0.5 * (left - right) / denom if denom != 0 else 0.0
    return float(((peak + 0.5 + shift) / ORIENTATION_BINS * 2 * np.pi) % (2 * np.pi))


def _descriptor(magnitude: np.ndarray, angle: np.ndarray, row: float, col: float, sigma: float, orientation: float) -> np.ndarray | None:
    hist_width = 3.0 * sigma
    radius = int(round(hist_width * np.sqrt(2) * (DESCRIPTOR_WIDTH + 1) * 0.5))
    r0, c0 = int(round(row)), int(round(col))
    rows = slice(max(r0 - radius, 1), min(r0 + radius + 1, magnitude.shape[0] - 1))
    cols = slice(max(c0 - radius, 1), min(c0 + radius + 1, magnitude.shape[1] - 1))
    yy, xx = np.mgrid[rows, cols]
    dy, dx = yy - row, xx - col
    cos_o, sin_o = np.cos(orientation), np.sin(orientation)
    # sample position in rotated histogram-bin coordinates, centered on the 4x4 grid
    rbin = (-sin_o * dx + cos_o * dy) / hist_width + DESCRIPTOR_WIDTH / 2 - 0.5
    cbin = (cos_o * dx + sin_o * dy) / hist_width + DESCRIPTOR_WIDTH / 2 - 0.5
    obin = ((angle[rows, cols] - orientation) % (2 * np.pi)) / (2 * np.pi) * DESCRIPTOR_BINS
    inside = (rbin > -1) & (rbin < DESCRIPTOR_WIDTH) & (cbin > -1) & (cbin < DESCRIPTOR_WIDTH)
    if not np.any(inside):
        return None
    weight = np.exp(-(((dx / hist_width) ** 2 + (dy / hist_width) ** 2)) / (2.0 * (0.5 * DESCRIPTOR_WIDTH) ** 2))
    values = (magnitude[rows, cols] * weight)[inside]
    rbin, cbin, obin = rbin[inside], cbin[inside], obin[inside]

    hist = np.zeros((DESCRIPTOR_WIDTH + 2, DESCRIPTOR_WIDTH + 2, DESCRIPTOR_BINS))
    r_floor, c_floor, o_floor = np.floor(rbin).astype(int), np.floor(cbin).astype(int), np.floor(obin).astype(int)
    fr, fc, fo = rbin - r_floor, cbin - c_floor, obin - o_floor
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            for do, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist, (r_floor + dr + 1, c_floor + dc + 1, (o_floor + do) % DESCRIPTOR_BINS), values * wr * wc * wo)

    vector = hist[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(vector)
    if norm == 0:
        return None
    vector = np.minimum(vector / norm, DESCRIPTOR_CLIP)
    return vector / np.linalg.norm(vector)


def detect_and_describe(image: np.ndarray, params: DetectorParams | None = None) -> list[tuple[Keypoint, np.ndarray]]:
    """
    Detect DoG keypoints and compute their descriptors.

    Args:
        image: Grayscale image (float in [0, 1] or integer), or RGB which is converted
        params: Detector parameters, defaults when omitted

    Returns:
        List of (Keypoint, unit descriptor of length 128) sorted by position; may be empty
        for textureless input

    Raises:
        ValueError: If the image is empty
    """
    params = params or DetectorParams()
    image = _as_float_image(image)
    if image.size == 0 or image.ndim != 2:
        raise ValueError(f"expected a non-empty 2-d image, got shape {image.shape}")

    features: list[tuple[Keypoint, np.ndarray]] = []
    for octave, levels in enumerate(_build_pyramid(image, params)):
        dog = np.stack([b - a for a, b in zip(levels[:-1], levels[1:], strict=True)])
        candidates = _find_extrema(dog, params)
        if len(candidates) == 0:
            continue
        kept, offsets, response = _refine(dog, candidates, params)
        gradients = {}
        for (s, y, x), offset, value in zip(candidates[kept], offsets[kept], response[kept], strict=True):
            s_fine = s + offset[0]
            row, col = y + offset[1], x + offset[2]
            sigma = SIGMA0 * 2.0 ** (s_fine / params.scales_per_octave)
            level = int(np.clip(round(s_fine), 0, len(levels) - 1))
            if level not in gradients:
                gradients[level] = _gradients(levels[level])
            magnitude, angle = gradients[level]
            orientation = _dominant_orientation(magnitude, angle, row, col, sigma)
            vector = _descriptor(magnitude, angle, row, col, sigma, orientation)
            if vector is None:
                continue
            factor = 2.0**octave
            keypoint = Keypoint(u=float(col * factor), v=float(row * factor), scale=float(sigma * factor), orientation=orientation, response=float(value), octave=octave)
            features.append((keypoint, vector))

    features.sort(key=lambda f: (f[0].v, f[0].u, f[0].scale))
    logger.debug(f"detect_and_describe: {len(features)} keypoints on a {image.shape[1]}x{image.shape[0]} image")
    return features


def match_forward_backward(desc0: np.ndarray, desc1: np.ndarray, max_distance: float) -> list[tuple[int, int]]:
    """
    Mutual nearest-neighbor matching by brute-force Euclidean distance.

    Pair (i, j) is kept iff j is the nearest neighbor of i in desc1, i is the nearest
    neighbor of j in desc0 and their distance is at most ``max_distance``. Ties resolve to
    the lower index.

    Returns:
        List of (i, j) index pairs in increasing i
    """
    desc0 = np.asarray(desc0, dtype=np.float64)
    desc1 = np.asarray(desc1, dtype=np.float64)
    if len(desc0) == 0 or len(desc1) == 0:
        return []
    distances = cdist(desc0.reshape(len(desc0), -1), desc1.reshape(len(desc1), -1))
    forward = np.argmin(distances, axis=1)
    backward = np.argmin(distances, axis=0)
    matches = [(i, int(j)) for i, j in enumerate(forward) if backward[j] == i and distances[i, j] <= max_distance]
    logger.debug(f"match_forward_backward: {len(matches)} mutual matches from {len(desc0)}x{len(desc1)}")
    return matches


def stack_descriptors(features: list[tuple[Keypoint, np.ndarray]]) -> np.ndarray:
    if not features:
        return np.zeros((0, DESCRIPTOR_WIDTH * DESCRIPTOR_WIDTH * DESCRIPTOR_BINS))
    return np.stack([descriptor for _, descriptor in features])
