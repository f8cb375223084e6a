"""Derived image products: point clouds, confidence maps and Canny edges."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .sensors import DepthCameraSpec, DepthImage, LaserScan, rotation_matrix


class DimensionError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray          # (n, 3) world frame
    stamp: float = 0.0
    source_pose_id: int | None = None
    # Sensor position the points were observed from.
    origin: np.ndarray | None = None

    def __len__(self):
        return len(self.points)


@dataclass
class EdgeImage:
    mask: np.ndarray            # uint8 in {0, 1}
    low: float
    high: float

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]


@dataclass
class ConfidenceMap:
    values: np.ndarray          # float32 in [0, 1]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# Point clouds


def depth_to_cloud(depth: DepthImage, position, attitude, spec: DepthCameraSpec | None = None,
                   source_pose_id: int | None = None) -> PointCloud:
    """Pinhole back-projection of valid pixels into the world frame."""
    spec = spec or depth.spec
    rays = spec.pixel_rays()
    ok = depth.valid
    d = depth.depth[ok].astype(np.float64)
    cam = rays[ok] * d[:, None]
    R = rotation_matrix(attitude)
    pts = cam @ R.T + np.asarray(position, dtype=float)
    return PointCloud(pts, depth.stamp, source_pose_id, np.array(position, dtype=float))


def slice_cloud(cloud: PointCloud, z: float, band: float) -> np.ndarray:
    """Horizontal (x, y) of points within ``band`` of altitude ``z``."""
    p = cloud.points
    m = np.abs(p[:, 2] - z) <= band
    return p[m, :2]


def depth_to_scan(depth: DepthImage, rows: int = 3, stamp: float | None = None) -> LaserScan:
    """Planar scan from the central image rows, one beam per column.

    Only the camera's horizontal field of view is covered; the remaining
    directions are left out of the scan entirely.
    """
    spec = depth.spec
    h = spec.height
    r0 = max(0, h // 2 - rows // 2 - (rows % 2 == 0))
    band = depth.depth[r0:r0 + rows].astype(np.float64)
    f = spec.focal
    cx, _ = spec.center
    u = (np.arange(spec.width) + 0.5 - cx) / f
    with np.errstate(all="ignore"):
        planar = band * np.sqrt(1.0 + u[None, :] ** 2)
        planar = np.where(np.isfinite(planar), planar, np.inf)
        ranges = planar.min(axis=0)
    angles = np.arctan(u)
    return LaserScan(depth.stamp if stamp is None else stamp, angles, ranges,
                     spec.max_range, spec.min_range)


# ---------------------------------------------------------------------------
# Confidence


def confidence_from_depth(depth: DepthImage | np.ndarray, incidence: np.ndarray | None = None,
                          max_range: float | None = None) -> ConfidenceMap:
    """``cos(incidence) * (1 - range / max_range)`` clamped to [0, 1]; invalid pixels get 0."""
    if isinstance(depth, DepthImage):
        inc = depth.incidence if incidence is None else incidence
        max_range = depth.spec.max_range if max_range is None else max_range
        d = depth.depth
    else:
        d = depth
        inc = incidence
        max_range = 10.0 if max_range is None else max_range
    d = np.asarray(d, dtype=np.float64)
    inc = np.asarray(inc, dtype=np.float64)
    if d.shape != inc.shape:
        raise DimensionError(f"depth {d.shape} and incidence {inc.shape} differ")
    with np.errstate(invalid="ignore"):
        c = np.cos(inc) * (1.0 - d / max_range)
    c = np.where(np.isfinite(c), np.clip(c, 0.0, 1.0), 0.0)
    return ConfidenceMap(c.astype(np.float32))


# ---------------------------------------------------------------------------
# Canny

# Integer 5x5 approximation of a sigma = 1.4 Gaussian, normalised by 159.
GAUSS_5x5 = np.array([
    [2, 4, 5, 4, 2],
    [4, 9, 12, 9, 4],
    [5, 12, 15, 12, 5],
    [4, 9, 12, 9, 4],
    [2, 4, 5, 4, 2],
], dtype=np.float64)
GAUSS_NORM = 159.0

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T

_TAN_22_5 = math.tan(math.radians(22.5))
_TAN_67_5 = math.tan(math.radians(67.5))


def _correlate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return ndimage.correlate(img, kernel, mode="nearest")


def gradient_direction_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Quantise gradient direction into 0: horizontal, 1: 45 deg, 2: vertical, 3: 135 deg.

    Row index grows downward, so 45 deg means the gradient points to
    (down, right).
    """
    ax = np.abs(gx)
    ay = np.abs(gy)
    bins = np.full(gx.shape, 2, dtype=np.int8)
    bins[ay <= _TAN_22_5 * ax] = 0
    diag = (ay > _TAN_22_5 * ax) & (ay <= _TAN_67_5 * ax)
    same_sign = (gx * gy) > 0
    bins[diag & same_sign] = 1
    bins[diag & ~same_sign] = 3
    return bins


def non_max_suppression(mag: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Keep pixels strictly above the backward neighbour and not below the forward one.

    The asymmetric comparison breaks ties on symmetric ridges so a step
    edge yields a single-pixel line.  Border pixels are suppressed.
    """
    h, w = mag.shape
    out = np.zeros_like(mag)
    c = mag[1:-1, 1:-1]
    # (dr, dc) of the forward neighbour for each bin.
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    for b, (dr, dc) in offsets.items():
        fwd = mag[1 + dr:h - 1 + dr, 1 + dc:w - 1 + dc]
        bwd = mag[1 - dr:h - 1 - dr, 1 - dc:w - 1 - dc]
        keep = (bins[1:-1, 1:-1] == b) & (c > bwd) & (c >= fwd)
        out[1:-1, 1:-1][keep] = c[keep]
    return out


def hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    """8-connected hysteresis: weak pixels survive when linked to a strong one."""
    weak = nms >= low
    strong = nms >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(nms.shape, dtype=np.uint8)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.uint8)


def canny_edges(image: np.ndarray, low: float, high: float) -> EdgeImage:
    """Gaussian 5x5 -> Sobel 3x3 -> non-maximum suppression -> hysteresis.

    Thresholds apply to the L2 Sobel magnitude of the smoothed image, on
    the intensity scale of the input (0-255 for 8-bit images).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 5 or img.shape[1] < 5:
        raise DimensionError(f"canny needs a 2-D image of at least 5x5, got {img.shape}")
    if not 0 < low < high:
        raise ValueError("thresholds must satisfy 0 < low < high")
    # Normalise only at the end: on integer images every intermediate sum
    # is exact, so the result does not depend on summation order.
    smooth = _correlate(img, GAUSS_5x5)
    gx = _correlate(smooth, SOBEL_X)
    gy = _correlate(smooth, SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy) / GAUSS_NORM
    bins = gradient_direction_bins(gx, gy)
    nms = non_max_suppression(mag, bins)
    return EdgeImage(hysteresis(nms, low, high), float(low), float(high))


def depth_to_gray(depth: DepthImage) -> np.ndarray:
    """Normalised inverse depth as an 8-bit image; invalid pixels are black."""
    spec = depth.spec
    inv_lo, inv_hi = 1.0 / spec.max_range, 1.0 / spec.min_range
    with np.errstate(divide="ignore", invalid="ignore"):
        g = (1.0 / depth.depth.astype(np.float64) - inv_lo) / (inv_hi - inv_lo)
    g = np.where(np.isfinite(g), np.clip(g, 0.0, 1.0), 0.0)
    return np.round(g * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# PGM


def to_u8(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    if lo is None:
        lo = float(v[finite].min()) if finite.any() else 0.0
    if hi is None:
        hi = float(v[finite].max()) if finite.any() else 1.0
    span = hi - lo if hi > lo else 1.0
    out = np.where(finite, np.clip((v - lo) / span, 0.0, 1.0), 0.0)
    return np.round(out * 255.0).astype(np.uint8)


def encode_pgm(img: np.ndarray, comments: list[str] | tuple[str, ...] = (), binary: bool = True) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    head = ["P5" if binary else "P2"]
    head += [f"# {c}" for c in comments]
    head += [f"{w} {h}", "255"]
    header = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        return header + img.tobytes()
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in img)
    return header + rows.encode("ascii") + b"\n"


def decode_pgm(data: bytes) -> tuple[np.ndarray, list[str]]:
    comments: list[str] = []
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1
    if magic == b"P5":
        img = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()
    elif magic == b"P2":
        img = np.array(data[pos:].split(), dtype=np.int64).astype(np.uint8).reshape(h, w)
    else:
        raise ValueError(f"not a PGM: {magic!r}")
    return img, comments
