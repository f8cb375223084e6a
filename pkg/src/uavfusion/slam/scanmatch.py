"""Scan-to-map alignment: correlative grid search then ICP against occupied cells."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import se2
from .occupancy import OccupancyGrid

MIN_SCORE = 0.2
MIN_BEAMS = 10


class ScanMatchError(ValueError):
    pass


class LowOverlapError(ScanMatchError):
    def __init__(self, score: float, pose: np.ndarray):
        super().__init__(f"scan/map overlap too low (score {score:.3f})")
        self.score = score
        self.pose = pose


@dataclass(frozen=True)
class MatchParams:
    window_xy: float = 0.5
    window_yaw: float = math.radians(15.0)
    coarse_xy_step: int = 2             # cells
    coarse_yaw_step: float = math.radians(2.0)
    fine_yaw_step: float = math.radians(0.5)
    field_sigma: float = 0.08           # m, correlative likelihood width
    icp_iterations: int = 20
    icp_tol: float = 5e-4               # m or rad per iteration
    icp_max_dist: float = 0.25
    beam_stride: int = 2


def likelihood_field(grid: OccupancyGrid, sigma: float) -> np.ndarray:
    occ = grid.occupied()
    d = ndimage.distance_transform_edt(~occ) * grid.cell_size
    return np.exp(-0.5 * (d / sigma) ** 2)


def _correlative(points, grid, field, center, params):
    cs = grid.cell_size
    W, H = grid.width, grid.height

    def search(c, xy_cells, xy_step, yaws):
        offs = np.arange(-xy_cells, xy_cells + 1, xy_step)
        di, dj = np.meshgrid(offs, offs, indexing="ij")
        di, dj = di.ravel(), dj.ravel()
        best = (-1.0, c)
        for dyaw in yaws:
            yaw = c[2] + dyaw
            p = se2.transform_points((c[0], c[1], yaw), points)
            ij = np.floor((p - grid.origin) / cs).astype(np.int64)
            ii = ij[:, 0:1] + di[None, :]
            jj = ij[:, 1:2] + dj[None, :]
            ok = (ii >= 0) & (ii < W) & (jj >= 0) & (jj < H)
            vals = np.where(ok, field[np.clip(ii, 0, W - 1), np.clip(jj, 0, H - 1)], 0.0)
            scores = vals.sum(axis=0)
            k = int(np.argmax(scores))
            if scores[k] > best[0]:
                best = (float(scores[k]), np.array([c[0] + di[k] * cs, c[1] + dj[k] * cs, se2.wrap(yaw)]))
        return best[1]

    xy_cells = int(round(params.window_xy / cs))
    n_yaw = int(round(params.window_yaw / params.coarse_yaw_step))
    coarse = search(center, xy_cells, params.coarse_xy_step,
                    np.arange(-n_yaw, n_yaw + 1) * params.coarse_yaw_step)
    n_fine = int(round(params.coarse_yaw_step / params.fine_yaw_step))
    return search(coarse, params.coarse_xy_step, 1,
                  np.arange(-n_fine, n_fine + 1) * params.fine_yaw_step)


def _kabsch2d(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray]:
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    sxx = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    sxy = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    theta = math.atan2(sxy, sxx)
    t = md - se2.rot(theta) @ ms
    return theta, t


def icp_refine(points: np.ndarray, grid: OccupancyGrid, pose, params: MatchParams) -> np.ndarray:
    """Point-to-cell ICP.

    Each endpoint is paired with the closest point of the nearest occupied
    cell's square, so an endpoint already inside an occupied cell exerts no
    pull.  Pairing with cell centres instead would bias the pose by up to
    half a cell toward the centre lattice.
    """
    tree = grid.occupied_tree()
    centers = grid._tree_cache[2]
    half = 0.5 * grid.cell_size
    pose = np.array(pose, dtype=float)
    max_d = params.icp_max_dist
    for it in range(params.icp_iterations):
        p = se2.transform_points(pose, points)
        d, idx = tree.query(p, distance_upper_bound=max_d + half * math.sqrt(2.0))
        ok = np.isfinite(d)
        if ok.sum() < 3:
            break
        c = centers[idx[ok]]
        target = np.clip(p[ok], c - half, c + half)
        theta, t = _kabsch2d(p[ok], target)
        # Left-compose the correction onto the current pose.
        R = se2.rot(theta)
        new_xy = R @ pose[:2] + t
        new = np.array([new_xy[0], new_xy[1], se2.wrap(pose[2] + theta)])
        change = max(float(np.hypot(*(new[:2] - pose[:2]))), abs(theta))
        pose = new
        if it > 2:
            max_d = max(grid.cell_size * 2.0, max_d * 0.7)
        if change < params.icp_tol:
            break
    return pose


def match_score(points: np.ndarray, grid: OccupancyGrid, pose) -> float:
    """Fraction of endpoints within one cell of an occupied cell centre.

    A strict same-cell test flips on walls that sit exactly on cell
    boundaries, so a one-cell tolerance keeps the score stable.
    """
    tree = grid.occupied_tree()
    if tree is None or len(points) == 0:
        return 0.0
    p = se2.transform_points(pose, points)
    d, _ = tree.query(p, distance_upper_bound=grid.cell_size * 1.0001)
    return float(np.mean(np.isfinite(d)))


def scan_match(scan, grid: OccupancyGrid, initial, params: MatchParams | None = None,
               search: bool = True, min_score: float = MIN_SCORE) -> tuple[np.ndarray, float]:
    """Align ``scan`` to ``grid`` starting from ``initial`` = (x, y, yaw).

    With ``search`` the pose is first located by exhaustive correlation
    over the window; ICP then refines it against occupied cell centres.
    Raises ``LowOverlapError`` when the final score is below ``min_score``.
    """
    params = params or MatchParams()
    if not grid.occupied().any():
        raise ScanMatchError("map has no occupied cells")
    pts = scan.points()
    if len(pts) < MIN_BEAMS:
        raise ScanMatchError(f"scan has {len(pts)} valid beams, need {MIN_BEAMS}")
    pose = np.array(initial, dtype=float)
    sub = pts[::params.beam_stride] if len(pts) >= 2 * MIN_BEAMS * params.beam_stride else pts
    if search:
        field = likelihood_field(grid, params.field_sigma)
        pose = _correlative(sub, grid, field, pose, params)
    pose = icp_refine(sub, grid, pose, params)
    # ICP must not wander outside the search window.
    init = np.asarray(initial, dtype=float)
    off = se2.between(init, pose)
    if search and (abs(pose[0] - init[0]) > params.window_xy + 0.1
                   or abs(pose[1] - init[1]) > params.window_xy + 0.1
                   or abs(off[2]) > params.window_yaw + math.radians(2)):
        raise LowOverlapError(0.0, pose)
    score = match_score(pts, grid, pose)
    if score < min_score:
        raise LowOverlapError(score, pose)
    return pose, score


# ---------------------------------------------------------------------------
# Point-to-line tracking against keyframe scans


@dataclass
class ReferenceCloud:
    """World-frame scan points with unit surface normals and a KD-tree."""

    points: np.ndarray
    normals: np.ndarray
    tree: cKDTree

    def __len__(self):
        return len(self.points)


def estimate_normals(points: np.ndarray, k: int = 6, radius: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-point normal and flatness (smallest / largest neighbourhood eigenvalue).

    Points with fewer than three neighbours inside ``radius`` get flatness 1.
    """
    n = len(points)
    tree = cKDTree(points)
    k = min(k, n)
    d, idx = tree.query(points, k=k, distance_upper_bound=radius)
    if idx.ndim == 1:
        d, idx = d[:, None], idx[:, None]
    ok = np.isfinite(d)
    cnt = ok.sum(axis=1)
    nb = points[np.where(ok, idx, 0)]
    w = ok[..., None].astype(float)
    mean = (nb * w).sum(axis=1) / np.maximum(cnt, 1)[:, None]
    c = (nb - mean[:, None, :]) * w
    a = np.einsum("nk,nk->n", c[..., 0], c[..., 0])
    b = np.einsum("nk,nk->n", c[..., 0], c[..., 1])
    e = np.einsum("nk,nk->n", c[..., 1], c[..., 1])
    half_tr = 0.5 * (a + e)
    root = np.sqrt(0.25 * (a - e) ** 2 + b * b)
    lam_max = half_tr + root
    lam_min = half_tr - root
    phi = 0.5 * np.arctan2(2.0 * b, a - e)          # principal (tangent) direction
    normals = np.stack([-np.sin(phi), np.cos(phi)], axis=1)
    flat = np.where((cnt >= 3) & (lam_max > 0), lam_min / np.maximum(lam_max, 1e-300), 1.0)
    return normals, flat


def reference_cloud(points: np.ndarray, max_flatness: float = 0.02) -> ReferenceCloud | None:
    """Keep only points on locally straight surfaces; corners give no usable normal."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) < MIN_BEAMS:
        return None
    normals, flat = estimate_normals(points)
    keep = flat <= max_flatness
    if keep.sum() < MIN_BEAMS:
        return None
    pts = points[keep]
    return ReferenceCloud(pts, normals[keep], cKDTree(pts))


def track_icp(points: np.ndarray, ref: ReferenceCloud, pose, iterations: int = 30,
              max_dist: float = 0.2, tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Point-to-line Gauss-Newton ICP of body-frame ``points`` onto ``ref``.

    Returns the pose and the fraction of points paired within ``max_dist``.
    """
    pose = np.array(pose, dtype=float)
    frac = 0.0
    for _ in range(iterations):
        p = se2.transform_points(pose, points)
        d, idx = ref.tree.query(p, distance_upper_bound=max_dist)
        ok = np.isfinite(d)
        frac = float(np.mean(ok)) if len(ok) else 0.0
        if ok.sum() < 3:
            break
        pk, q, nrm = p[ok], ref.points[idx[ok]], ref.normals[idx[ok]]
        r = np.einsum("ij,ij->i", nrm, pk - q)
        # Trim pairs far off the line fit, mostly points next to corners.
        keep = np.abs(r) <= 3.0 * np.median(np.abs(r)) + 1e-3
        if keep.sum() >= 3:
            pk, nrm, r = pk[keep], nrm[keep], r[keep]
        rel = pk - pose[:2]
        J = np.column_stack([nrm[:, 0], nrm[:, 1], nrm[:, 1] * rel[:, 0] - nrm[:, 0] * rel[:, 1]])
        H = J.T @ J
        H += np.eye(3) * 1e-9 * max(np.trace(H), 1e-12)
        step = -np.linalg.solve(H, J.T @ r)
        pose = pose + step
        pose[2] = se2.wrap(pose[2])
        if max(abs(step[0]), abs(step[1]), abs(step[2])) < tol:
            break
    return pose, frac
