"""Log-odds occupancy grid, ray-traversal updates and map scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..perception import encode_pgm
from ..world import WorldModel
from . import se2

L_FREE = -0.4
L_OCC = 0.85
L_CLAMP = 10.0
RMSE_PENALTY = 1.0


class EmptyMapError(ValueError):
    pass


@dataclass
class OccupancyGrid:
    origin: np.ndarray
    cell_size: float
    width: int
    height: int
    logodds: np.ndarray = field(default=None)
    version: int = 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        if self.logodds is None:
            self.logodds = np.zeros((self.width, self.height))
        self._tree_cache = None

    @classmethod
    def covering(cls, world: WorldModel, margin: float = 0.25) -> "OccupancyGrid":
        cs = world.cell_size
        lo = world.bounds.lo[:2] - margin
        ext = world.bounds.extent[:2] + 2 * margin
        w, h = (int(math.ceil(e / cs)) for e in ext)
        return cls(lo, cs, w, h)

    @classmethod
    def around(cls, pts: np.ndarray, cell_size: float, margin: float) -> "OccupancyGrid":
        lo = pts.min(axis=0) - margin
        hi = pts.max(axis=0) + margin
        w, h = (int(math.ceil(e / cell_size)) for e in hi - lo)
        return cls(lo, cell_size, max(w, 1), max(h, 1))

    def empty_like(self) -> "OccupancyGrid":
        return OccupancyGrid(self.origin.copy(), self.cell_size, self.width, self.height)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.origin.copy(), self.cell_size, self.width, self.height,
                             self.logodds.copy(), self.version)

    @property
    def extent_max(self) -> np.ndarray:
        return self.origin + self.cell_size * np.array([self.width, self.height])

    def contains(self, xy) -> bool:
        xy = np.asarray(xy)
        return bool(np.all(xy >= self.origin) and np.all(xy < self.extent_max))

    def cell_of(self, xy: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(xy) - self.origin) / self.cell_size).astype(np.int64)

    def center_of(self, ij: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(ij) + 0.5) * self.cell_size

    def occupied(self) -> np.ndarray:
        return self.logodds > 0.0

    def occupied_centers(self) -> np.ndarray:
        ij = np.argwhere(self.occupied())
        return self.center_of(ij)

    def occupied_tree(self):
        """KD-tree over occupied cell centres, cached per map version."""
        if self._tree_cache is None or self._tree_cache[0] != self.version:
            pts = self.occupied_centers()
            tree = cKDTree(pts) if len(pts) else None
            self._tree_cache = (self.version, tree, pts)
        return self._tree_cache[1]

    def probability(self) -> np.ndarray:
        return 1.0 - 1.0 / (1.0 + np.exp(self.logodds))

    def to_pgm(self) -> bytes:
        """P5 image, north up; free is white, occupied black, unknown mid-grey."""
        p = self.probability()
        img = np.round((1.0 - p) * 255.0).astype(np.uint8)
        # Rows run north to south, columns west to east.
        img = img[::-1, :]
        comments = [
            f"origin {self.origin[0]:.6f} {self.origin[1]:.6f}",
            f"cell_size {self.cell_size:.6f}",
            "axes rows=x(north, descending) cols=y(east)",
        ]
        return encode_pgm(img, comments)


def traverse_cells(grid: OccupancyGrid, origin_xy, endpoints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Every cell each ray from ``origin_xy`` passes through, endpoint cell excluded.

    Exact grid traversal: the parameters where a ray crosses vertical and
    horizontal grid lines are merged per ray, and the cell between each
    pair of consecutive crossings is read off at the segment midpoint.
    Returns ``(ray_index, cell_ij)`` in traversal order.
    """
    o = np.asarray(origin_xy, dtype=float)
    cs = grid.cell_size
    delta = endpoints - o
    n = len(endpoints)
    start = np.floor((o - grid.origin) / cs).astype(np.int64)
    end = grid.cell_of(endpoints)
    ts, rays = [np.zeros(n)], [np.arange(n)]
    for ax in (0, 1):
        cnt = np.abs(end[:, ax] - start[ax])
        ray = np.repeat(np.arange(n), cnt)
        k = np.arange(len(ray)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        step = np.sign(delta[:, ax]).astype(np.int64)
        # First line crossed is the far side of the start cell in the direction of travel.
        first = start[ax] + (step > 0)
        line = first[ray] + k * step[ray]
        ts.append((grid.origin[ax] + line * cs - o[ax]) / delta[ray, ax])
        rays.append(ray)
    t = np.concatenate(ts)
    ray = np.concatenate(rays)
    # t lies in [0, 1], so ray * 2 + t sorts by ray and then along the ray.
    order = np.argsort(ray * 2.0 + t, kind="stable")
    t, ray = t[order], ray[order]
    last = np.ones(len(t), dtype=bool)
    last[:-1] = ray[1:] != ray[:-1]
    # Segments between consecutive crossings of the same ray; the final
    # segment of each ray holds the endpoint and is skipped.
    seg = ~last
    mid = 0.5 * (t[:-1] + t[1:])[seg[:-1]]
    r = ray[:-1][seg[:-1]]
    pts = o + mid[:, None] * delta[r]
    ij = np.floor((pts - grid.origin) / cs).astype(np.int64)
    return r, ij


def integrate_points(grid: OccupancyGrid, origin_xy, endpoints: np.ndarray,
                     l_free: float = L_FREE, l_occ: float = L_OCC) -> OccupancyGrid:
    """Update ``grid`` in place with rays from ``origin_xy`` to each endpoint.

    Cells crossed by a ray get ``l_free`` once per ray, the endpoint cell
    gets ``l_occ``.  Cells outside the grid are ignored.
    """
    endpoints = np.asarray(endpoints, dtype=float).reshape(-1, 2)
    if len(endpoints) == 0:
        return grid
    W, H = grid.width, grid.height
    ray, ij = traverse_cells(grid, origin_xy, endpoints)
    end_ij = grid.cell_of(endpoints)
    lin = ij[:, 0] * H + ij[:, 1]
    end_lin = end_ij[:, 0] * H + end_ij[:, 1]
    mask = (ij[:, 0] >= 0) & (ij[:, 0] < W) & (ij[:, 1] >= 0) & (ij[:, 1] < H)
    # Exact corner passes leave a zero-length segment; never free the endpoint cell.
    mask &= lin != end_lin[ray]
    first = np.ones(len(lin), dtype=bool)
    first[1:] = (lin[1:] != lin[:-1]) | (ray[1:] != ray[:-1])
    mask &= first

    flat = grid.logodds.reshape(-1)
    free_counts = np.bincount(lin[mask], minlength=W * H)
    end_ok = (end_ij[:, 0] >= 0) & (end_ij[:, 0] < W) & (end_ij[:, 1] >= 0) & (end_ij[:, 1] < H)
    occ_counts = np.bincount(end_lin[end_ok], minlength=W * H)
    flat += l_free * free_counts + l_occ * occ_counts
    np.clip(flat, -L_CLAMP, L_CLAMP, out=flat)
    grid.version += 1
    return grid


def integrate_scan(grid: OccupancyGrid, scan, pose) -> OccupancyGrid:
    """Ray-trace a 2-D scan taken at ``pose`` = (x, y, yaw) into ``grid``."""
    pts = scan.points()
    if len(pts) == 0:
        return grid
    world_pts = se2.transform_points(pose, pts)
    return integrate_points(grid, pose[:2], world_pts)


def render_scan(grid: OccupancyGrid, pose, angles: np.ndarray, max_range: float):
    """Ranges from ``pose`` to the first occupied cell along each beam (inf on a miss)."""
    from ..sensors import LaserScan

    cs = grid.cell_size
    step = cs / 8.0
    t = np.arange(1, int(max_range / step) + 1) * step
    a = angles + pose[2]
    pts = pose[:2] + t[None, :, None] * np.stack([np.cos(a), np.sin(a)], axis=1)[:, None, :]
    ij = np.floor((pts - grid.origin) / cs).astype(np.int64)
    ok = (ij[..., 0] >= 0) & (ij[..., 0] < grid.width) & (ij[..., 1] >= 0) & (ij[..., 1] < grid.height)
    occ = np.zeros(ok.shape, dtype=bool)
    occ[ok] = grid.occupied()[ij[..., 0][ok], ij[..., 1][ok]]
    hit = occ.any(axis=1)
    first = np.argmax(occ, axis=1)
    ranges = np.where(hit, t[first], np.inf)
    return LaserScan(0.0, np.asarray(angles, dtype=float), ranges, max_range)


# ---------------------------------------------------------------------------
# Ground truth surfaces and scoring


def surface_samples(world: WorldModel, z: float, spacing: float | None = None,
                    include_bounds: bool = True) -> np.ndarray:
    """Points along every wall and obstacle face cut by the plane at altitude ``z``.

    Samples that fall strictly inside another solid are dropped since no
    sensor can ever see them.
    """
    spacing = spacing or world.cell_size / 2.0
    rects = []
    if include_bounds:
        rects.append((world.bounds.lo[:2], world.bounds.hi[:2]))
    solids = [b for b in world.obstacles if b.spans_z(z)]
    rects += [(b.lo[:2], b.hi[:2]) for b in solids]
    out = []
    for lo, hi in rects:
        for a, b in (((lo[0], lo[1]), (hi[0], lo[1])), ((hi[0], lo[1]), (hi[0], hi[1])),
                     ((hi[0], hi[1]), (lo[0], hi[1])), ((lo[0], hi[1]), (lo[0], lo[1]))):
            a, b = np.array(a), np.array(b)
            n = max(1, int(math.ceil(np.linalg.norm(b - a) / spacing)))
            s = (np.arange(n) + 0.5) / n
            out.append(a + s[:, None] * (b - a))
    pts = np.concatenate(out) if out else np.zeros((0, 2))
    keep = np.ones(len(pts), dtype=bool)
    for b in solids:
        strict = np.all((pts > b.lo[:2] + 1e-9) & (pts < b.hi[:2] - 1e-9), axis=1)
        keep &= ~strict
    return pts[keep]


def rasterize(world: WorldModel, grid: OccupancyGrid, z: float) -> OccupancyGrid:
    """Grid whose occupied cells are exactly those containing true surface points."""
    g = grid.empty_like()
    pts = surface_samples(world, z, spacing=grid.cell_size / 8.0)
    ij = g.cell_of(pts)
    ok = (ij[:, 0] >= 0) & (ij[:, 0] < g.width) & (ij[:, 1] >= 0) & (ij[:, 1] < g.height)
    g.logodds[ij[ok, 0], ij[ok, 1]] = L_OCC
    g.version += 1
    return g


def nearest_occupied_distance(grid: OccupancyGrid, pts: np.ndarray) -> np.ndarray:
    tree = grid.occupied_tree()
    if tree is None:
        raise EmptyMapError("map has no occupied cells")
    d, _ = tree.query(pts)
    return d


def map_rmse(grid: OccupancyGrid, world: WorldModel, z: float,
             penalty: float = RMSE_PENALTY) -> float:
    """RMS distance from true surface samples to the nearest occupied cell centre.

    Distances are capped at ``penalty`` so unmapped surfaces count as a
    fixed miss rather than an unbounded one.
    """
    pts = surface_samples(world, z)
    d = np.minimum(nearest_occupied_distance(grid, pts), penalty)
    return float(np.sqrt(np.mean(d * d)))


def coverage(grid: OccupancyGrid, pts: np.ndarray, radius: float) -> float:
    """Fraction of ``pts`` within ``radius`` of an occupied cell centre."""
    if len(pts) == 0:
        return 0.0
    tree = grid.occupied_tree()
    if tree is None:
        return 0.0
    d, _ = tree.query(pts, distance_upper_bound=radius * 1.0001)
    return float(np.mean(d <= radius))
