import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import canny_reference
from uavfusion.perception import (DimensionError, canny_edges, confidence_from_depth, decode_pgm, depth_to_cloud,
                                  depth_to_gray, depth_to_scan, encode_pgm)
from uavfusion.sensors import DepthCameraSpec, DepthImage, VehicleState, rotation_matrix, sample_depth
from uavfusion.world import default_world

SPEC = DepthCameraSpec()


def _image(depth):
    depth = np.asarray(depth, dtype=np.float32)
    return DepthImage(0.0, depth, np.zeros_like(depth), SPEC)


def test_all_invalid_image_gives_empty_cloud():
    img = _image(np.full((SPEC.height, SPEC.width), np.nan))
    assert len(depth_to_cloud(img, np.zeros(3), np.zeros(3))) == 0


def test_fronto_parallel_cloud_lies_on_plane():
    img = _image(np.full((SPEC.height, SPEC.width), 2.0))
    cloud = depth_to_cloud(img, np.zeros(3), np.zeros(3))
    assert len(cloud) == SPEC.width * SPEC.height
    assert np.all(cloud.points[:, 0] == 2.0)


def test_cloud_matches_per_pixel_back_projection(rng):
    d = rng.uniform(0.3, 10.0, (SPEC.height, SPEC.width))
    d[rng.random(d.shape) < 0.2] = np.nan
    img = _image(d)
    pos = np.array([1.0, 2.0, -1.0])
    att = np.array([0.05, -0.1, 0.7])
    cloud = depth_to_cloud(img, pos, att)
    R = rotation_matrix(att)
    f = SPEC.focal
    cx, cy = SPEC.center
    want = []
    for r in range(SPEC.height):
        for c in range(SPEC.width):
            z = float(img.depth[r, c])
            if math.isnan(z):
                continue
            cam = np.array([z, z * (c + 0.5 - cx) / f, z * (r + 0.5 - cy) / f])
            want.append(R @ cam + pos)
    assert np.allclose(cloud.points, np.array(want), rtol=0, atol=1e-12)


def test_depth_cloud_points_lie_on_surfaces():
    w = default_world()
    spec = DepthCameraSpec(depth_noise=0.0)
    for yaw in np.linspace(-math.pi, math.pi, 7, endpoint=False):
        truth = VehicleState(position=np.array([0.9, 0.9, -1.2]), attitude=np.array([0.02, -0.05, yaw]))
        img = sample_depth(w, truth, spec, np.random.default_rng(0))
        cloud = depth_to_cloud(img, truth.position, truth.attitude)
        d = [abs(w.clearance(p)) for p in cloud.points]
        assert max(d) <= 1e-6


def test_depth_to_scan_reads_central_rows():
    img = _image(np.full((SPEC.height, SPEC.width), 2.0))
    scan = depth_to_scan(img)
    assert len(scan.ranges) == SPEC.width
    # Planar range to a fronto-parallel wall is depth / cos(bearing).
    assert np.allclose(scan.ranges * np.cos(scan.angles), 2.0)
    assert np.all(np.abs(scan.angles) < SPEC.h_fov / 2)


def test_canny_uniform_image_has_no_edges():
    assert canny_edges(np.full((32, 32), 128.0), 20, 50).mask.sum() == 0


def test_canny_vertical_step_gives_single_line():
    img = np.zeros((20, 20))
    img[:, 10:] = 200.0
    m = canny_edges(img, 20, 50).mask
    cols = np.nonzero(m.any(axis=0))[0]
    assert len(cols) == 1 and cols[0] in (9, 10)
    # Every interior row carries the edge.
    assert m[1:-1, cols[0]].all()


@pytest.mark.parametrize("transpose", [False, True])
def test_canny_step_is_one_pixel_wide(transpose):
    img = np.zeros((24, 24))
    img[:, 12:] = 255.0
    if transpose:
        img = img.T
    m = canny_edges(img, 10, 30).mask
    m = m.T if transpose else m
    assert np.all(m.sum(axis=1)[1:-1] == 1)


def test_canny_diagonal_step_is_thin():
    r, c = np.mgrid[0:24, 0:24]
    img = np.where(r > c, 255.0, 0.0)
    m = canny_edges(img, 10, 30).mask
    # Along the gradient direction (anti-diagonals) each ridge keeps one pixel.
    for k in range(4, 20):
        line = [m[k + d, k - d] for d in range(-3, 4)]
        assert sum(line) <= 1


def test_canny_matches_reference_on_random_images():
    rng = np.random.default_rng(2024)
    for _ in range(10):
        img = rng.integers(0, 256, (32, 32))
        lo, hi = sorted(rng.uniform(5, 80, 2))
        got = canny_edges(img.astype(float), lo, hi).mask
        assert np.array_equal(got, canny_reference(img, lo, hi))


def test_canny_on_own_output_stays_at_boundaries():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (32, 32))
    m = canny_edges(img.astype(float), 20, 60).mask
    again = canny_edges(m * 255.0, 20, 60).mask
    for r, c in zip(*np.nonzero(again)):
        patch = m[max(r - 2, 0):r + 3, max(c - 2, 0):c + 3]
        assert patch.min() == 0 and patch.max() == 1


def test_canny_argument_checks():
    with pytest.raises(DimensionError):
        canny_edges(np.zeros((4, 10)), 1, 2)
    with pytest.raises(ValueError):
        canny_edges(np.zeros((8, 8)), 5, 2)
    with pytest.raises(ValueError):
        canny_edges(np.zeros((8, 8)), 0, 2)


def test_confidence_examples():
    d = np.array([[np.nan, 0.01, 5.0]])
    inc = np.array([[0.0, 0.0, math.pi / 2]])
    c = confidence_from_depth(d, inc, 10.0).values
    assert c.dtype == np.float32
    assert c[0, 0] == 0.0
    assert c[0, 1] == pytest.approx(1 - 0.01 / 10, abs=1e-7)
    assert c[0, 2] == pytest.approx(0.0, abs=1e-7)


def test_confidence_dimension_mismatch():
    with pytest.raises(DimensionError):
        confidence_from_depth(np.ones((2, 2)), np.zeros((2, 3)))


@given(st.floats(0.0, 1.5), st.floats(0.3, 9.0), st.floats(0.01, 0.9))
def test_confidence_decreases_with_range(inc, r, dr):
    c = confidence_from_depth(np.array([[r, r + dr]]), np.full((1, 2), inc), 10.0).values
    assert 0.0 <= c[0, 1] <= c[0, 0] <= 1.0
    if inc < 1.4:
        assert c[0, 1] < c[0, 0]


def test_confidence_of_depth_image_zero_on_invalid():
    truth = VehicleState(position=np.array([0.9, 0.9, -1.2]))
    img = sample_depth(default_world(), truth, SPEC, np.random.default_rng(0))
    c = confidence_from_depth(img).values
    assert np.all(c[~img.valid] == 0.0)
    assert np.all((c >= 0) & (c <= 1))


def test_gray_image_is_normalised_inverse_depth():
    img = _image(np.array([[SPEC.min_range, SPEC.max_range, np.nan]]))
    assert depth_to_gray(img).tolist() == [[255, 0, 0]]


@pytest.mark.parametrize("binary", [True, False])
def test_pgm_round_trip(binary, rng):
    img = rng.integers(0, 256, (7, 5)).astype(np.uint8)
    data = encode_pgm(img, ["origin 0 0", "cell_size 0.05"], binary=binary)
    back, comments = decode_pgm(data)
    assert np.array_equal(back, img)
    assert comments == ["origin 0 0", "cell_size 0.05"]
