import math

import numpy as np
import pytest

from uavfusion.sensors import LaserScan, LidarSpec, sample_lidar
from uavfusion.slam import (EmptyMapError, LoopParams, LowOverlapError, OccupancyGrid, PoseGraph,
                            ScanMatchError, detect_loop, integrate_points, integrate_scan, map_rmse,
                            reference_cloud, scan_match, track_icp)
from uavfusion.slam import se2
from uavfusion.slam.occupancy import L_CLAMP, L_FREE, L_OCC, coverage, rasterize, traverse_cells
from uavfusion.perception import decode_pgm
from uavfusion.world import VehicleState, default_world

Z = -1.2
CLEAN = LidarSpec(noise_sigma=0.0)


def _at(x, y, yaw=0.0):
    return VehicleState(position=np.array([x, y, Z]), attitude=np.array([0.0, 0.0, yaw]))


def _scan(world, x, y, yaw=0.0, spec=CLEAN, seed=0):
    return sample_lidar(world, _at(x, y, yaw), spec, np.random.default_rng(seed))


def _grid(cs=0.1, n=40):
    return OccupancyGrid(np.zeros(2), cs, n, n)


def _dense_cells(grid, o, end, step=2e-5):
    # Sample the segment finely; the oracle for exact traversal.
    n = int(np.linalg.norm(end - o) / step) + 2
    t = np.linspace(0.0, 1.0, n)
    ij = np.floor((o + t[:, None] * (end - o)) / grid.cell_size).astype(int)
    cells = {tuple(c) for c in ij}
    cells.discard(tuple(np.floor(end / grid.cell_size).astype(int)))
    return cells


def test_traversal_matches_dense_sampling():
    g = _grid()
    rng = np.random.default_rng(11)
    o = rng.uniform(0.5, 3.5, 2)
    ends = rng.uniform(0.1, 3.9, (60, 2))
    ray, ij = traverse_cells(g, o, ends)
    for k, e in enumerate(ends):
        got = {tuple(c) for c in ij[ray == k]}
        got.discard(tuple(g.cell_of(e)))
        assert got == _dense_cells(g, o, e)


def test_single_ray_free_and_hit():
    g = _grid()
    integrate_points(g, [0.05, 0.05], np.array([[1.05, 0.05]]))
    row = g.logodds[:, 0]
    assert np.all(row[:10] == L_FREE)
    assert row[10] == L_OCC
    assert np.all(row[11:] == 0.0)
    assert g.logodds[:, 1:].sum() == 0.0


def test_double_integration_doubles():
    w = default_world()
    scan = _scan(w, 0.9, 0.9)
    a = integrate_scan(OccupancyGrid.covering(w), scan, [0.9, 0.9, 0.0])
    b = integrate_scan(integrate_scan(OccupancyGrid.covering(w), scan, [0.9, 0.9, 0.0]), scan, [0.9, 0.9, 0.0])
    # Cells that only ever see one kind of update double exactly.
    pure = (a.logodds == L_OCC) | (a.logodds == L_FREE)
    assert np.array_equal(b.logodds[pure], 2.0 * a.logodds[pure])


def test_logodds_clamped():
    g = _grid()
    for _ in range(30):
        integrate_points(g, [0.05, 0.05], np.array([[1.05, 0.05]]))
    assert g.logodds.max() == L_CLAMP and g.logodds.min() == -L_CLAMP


def test_points_outside_grid_are_ignored():
    g = _grid(n=10)
    integrate_points(g, [0.05, 0.05], np.array([[5.0, 0.05]]))
    assert g.logodds[:, 0].tolist() == [L_FREE] * 10


def test_rasterised_truth_within_half_diagonal():
    w = default_world()
    g = rasterize(w, OccupancyGrid.covering(w), Z)
    assert map_rmse(g, w, Z) <= g.cell_size / math.sqrt(2)


def test_empty_map_has_no_rmse():
    w = default_world()
    with pytest.raises(EmptyMapError):
        map_rmse(OccupancyGrid.covering(w), w, Z)


def test_shifted_map_error_near_shift():
    w = default_world()
    g = rasterize(w, OccupancyGrid.covering(w), Z)
    moved = OccupancyGrid(g.origin + [0.1 / math.sqrt(2)] * 2, g.cell_size, g.width, g.height, g.logodds.copy())
    assert map_rmse(moved, w, Z) == pytest.approx(0.1, abs=g.cell_size)


def test_truth_pose_mapping_is_accurate():
    w = default_world()
    g = OccupancyGrid.covering(w)
    for x, y in [(0.9, 0.9), (6.1, 0.9), (6.1, 6.1), (0.9, 6.1), (3.5, 3.5), (3.5, 0.9), (0.9, 3.5)]:
        integrate_scan(g, _scan(w, x, y), [x, y, 0.0])
    assert map_rmse(g, w, Z) < g.cell_size


def test_coverage_and_pgm():
    w = default_world()
    g = rasterize(w, OccupancyGrid.covering(w), Z)
    assert coverage(g, g.occupied_centers(), 0.01) == 1.0
    assert coverage(g.empty_like(), g.occupied_centers(), 1.0) == 0.0
    img, comments = decode_pgm(g.to_pgm())
    assert img.shape == (g.height, g.width)
    assert comments[1] == f"cell_size {g.cell_size:.6f}"


def _truth_map(world):
    return rasterize(world, OccupancyGrid.covering(world), Z)


def test_scan_match_self_consistency():
    w = default_world()
    truth = np.array([0.9, 0.9, 0.3])
    scan = _scan(w, *truth)
    own = integrate_scan(OccupancyGrid.covering(w), scan, truth)
    pose, score = scan_match(scan, own, truth)
    assert score >= 0.95
    assert np.allclose(pose[:2], truth[:2], atol=0.02)
    pose, score = scan_match(scan, _truth_map(w), truth)
    assert score >= 0.95
    assert np.allclose(pose[:2], truth[:2], atol=0.02)


@pytest.mark.parametrize("where", [(0.9, 0.9, 0.3), (6.1, 3.5, -2.0), (3.5, 6.1, 1.2)])
def test_scan_match_recovers_offset(where):
    w = default_world()
    truth = np.array(where)
    scan = _scan(w, *truth, spec=LidarSpec(), seed=4)
    start = truth + [0.3, 0.2, math.radians(5)]
    pose, _ = scan_match(scan, _truth_map(w), start)
    assert abs(pose[0] - truth[0]) <= 0.05 and abs(pose[1] - truth[1]) <= 0.05
    assert abs(se2.wrap(pose[2] - truth[2])) <= math.radians(1)


def test_scan_match_low_overlap():
    w = default_world()
    g = OccupancyGrid.covering(w)
    g.logodds[10:14, 10:14] = 1.0
    with pytest.raises(LowOverlapError) as info:
        scan_match(_scan(w, 3.5, 3.5), g, [3.5, 3.5, 0.0])
    assert info.value.score < 0.2


def test_scan_match_input_errors():
    w = default_world()
    with pytest.raises(ScanMatchError):
        scan_match(_scan(w, 0.9, 0.9), OccupancyGrid.covering(w), [0.9, 0.9, 0.0])
    few = LaserScan(0.0, np.linspace(0, 1, 5), np.ones(5), 12.0)
    with pytest.raises(ScanMatchError):
        scan_match(few, _truth_map(w), [0.9, 0.9, 0.0])


def test_point_to_line_tracking_converges():
    w = default_world()
    truth = np.array([0.9, 1.4, 0.2])
    ref_scan = _scan(w, *truth)
    ref = reference_cloud(se2.transform_points(truth, ref_scan.points()))
    assert ref is not None
    pts = _scan(w, *truth).points()
    pose, frac = track_icp(pts, ref, truth + [0.08, -0.05, math.radians(2)])
    assert frac > 0.9
    assert np.allclose(pose, truth, atol=1e-4)


def test_reference_cloud_needs_points():
    assert reference_cloud(np.zeros((3, 2))) is None


def _graph_along(world, path):
    g = PoseGraph()
    for k, (x, y) in enumerate(path):
        g.add_node([x, y, 0.0], float(k), _scan(world, x, y))
        if k:
            g.add_odom_edge(k - 1, k, se2.between(g.nodes[k - 1].pose, g.nodes[k].pose), np.eye(3))
    return g


def _square_path(step=0.25):
    corners = [(0.9, 0.9), (6.1, 0.9), (6.1, 6.1), (0.9, 6.1), (0.9, 0.9)]
    out = []
    for a, b in zip(corners, corners[1:]):
        n = int(round(math.dist(a, b) / step))
        out += [(a[0] + (b[0] - a[0]) * k / n, a[1] + (b[1] - a[1]) * k / n) for k in range(n)]
    return out + [(0.9, 1.0)]


def test_straight_line_has_no_loop():
    w = default_world()
    g = _graph_along(w, [(0.9 + 0.2 * k, 0.9) for k in range(27)])
    det = detect_loop(g, len(g) - 1)
    assert det.candidates == [] and det.proximity == []


def test_square_loop_finds_start():
    w = default_world()
    g = _graph_along(w, _square_path())
    det = detect_loop(g, len(g) - 1)
    assert det.candidates
    c = det.candidates[0]
    assert c.match <= 4 and c.score >= 0.6
    want = se2.between(g.nodes[c.match].pose, g.nodes[-1].pose)
    assert np.allclose(c.relative_pose, want, atol=0.05)


def test_radius_pass_with_poor_match_is_proximity_only():
    w = default_world()
    g = _graph_along(w, _square_path())
    # A scan from the far corner shares almost nothing with the start submap.
    g.nodes[-1].scan = _scan(w, 3.5, 3.5, yaw=1.0)
    det = detect_loop(g, len(g) - 1, LoopParams(min_score=0.6))
    assert det.proximity
    assert det.candidates == []
    assert all(s < 0.6 for s in det.scores.values())


def test_query_without_scan_rejected():
    g = PoseGraph()
    g.add_node([0, 0, 0])
    with pytest.raises(ValueError):
        detect_loop(g, 0)
