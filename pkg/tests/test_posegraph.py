import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import edge_error, graph_oracle, hom, random_graph, unhom
from uavfusion.slam import (GraphError, PoseGraph, SingularGraphError, edge_jacobians, edge_residual,
                            optimize_graph)
from uavfusion.slam import se2
from uavfusion.slam.g2o import dumps_g2o, edges_csv, loads_g2o, nodes_csv
from uavfusion.slam.posegraph import chi2_of, huber

pose = st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3.1, 3.1)).map(np.array)


def _graph(init, edges):
    g = PoseGraph()
    for p in init:
        g.add_node(p)
    for i, j, z, info, loop in edges:
        if loop:
            g.add_loop_edge(i, j, z, info)
        else:
            g.add_odom_edge(i, j, z, info)
    return g


def _square(noise=0.0):
    # Drive a 2 m square and close back onto the start.
    truth = [np.array([0.0, 0.0, 0.0]), np.array([2.0, 0.0, math.pi / 2]),
             np.array([2.0, 2.0, math.pi]), np.array([0.0, 2.0, -math.pi / 2])]
    info = np.diag([100.0, 100.0, 400.0])
    edges = []
    for i in range(3):
        z = se2.between(truth[i], truth[i + 1]) + [noise, -noise, noise]
        edges.append((i, i + 1, z, info, False))
    edges.append((3, 0, se2.between(truth[3], truth[0]), info, True))
    init = [truth[0]]
    for _, _, z, _, _ in edges[:3]:
        init.append(se2.compose(init[-1], z))
    return np.array(init), edges


@given(pose, pose, pose)
def test_residual_matches_matrix_oracle(xi, xj, z):
    got = edge_residual(xi, xj, z)
    want = edge_error(xi, xj, z)
    assert np.allclose(got[:2], want[:2], atol=1e-9)
    assert abs(math.remainder(got[2] - want[2], 2 * math.pi)) <= 1e-9


@given(pose, pose, pose)
def test_jacobians_match_finite_differences(xi, xj, z):
    A, B = edge_jacobians(xi, xj, z)
    h = 1e-6
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        num_a = (edge_residual(xi + d, xj, z) - edge_residual(xi - d, xj, z)) / (2 * h)
        num_b = (edge_residual(xi, xj + d, z) - edge_residual(xi, xj - d, z)) / (2 * h)
        num_a[2] = math.remainder(num_a[2] * 2 * h, 2 * math.pi) / (2 * h)
        num_b[2] = math.remainder(num_b[2] * 2 * h, 2 * math.pi) / (2 * h)
        assert np.allclose(A[:, k], num_a, atol=1e-5)
        assert np.allclose(B[:, k], num_b, atol=1e-5)


def test_huber_cost_and_weight():
    rho, w = huber(np.array([0.25, 1.0, 9.0]))
    assert np.allclose(rho, [0.25, 1.0, 5.0])
    assert np.allclose(w, [1.0, 1.0, 1.0 / 3.0])


def test_consistent_chain_is_already_optimal():
    rng = np.random.default_rng(1)
    g = PoseGraph()
    g.add_node([0.0, 0.0, 0.0])
    for i in range(9):
        z = rng.uniform([-1, -1, -1], [1, 1, 1])
        g.add_node(se2.compose(g.nodes[-1].pose, z))
        g.add_odom_edge(i, i + 1, z, np.eye(3))
    res = optimize_graph(g)
    assert res.chi2 < 1e-12
    # Poses stay the composed chain.
    for a, b in zip(res.poses, g.poses()):
        assert np.allclose(a, b, atol=1e-9)


def test_single_node_and_no_edges():
    g = PoseGraph()
    g.add_node([1.0, 2.0, 0.3])
    res = optimize_graph(g)
    assert res.chi2 == 0.0 and res.iterations == 0
    assert np.array_equal(res.poses, [[1.0, 2.0, 0.3]])


def test_square_loop_matches_oracle():
    init, edges = _square(noise=0.05)
    res = optimize_graph(_graph(init, edges), tol=1e-12)
    want = graph_oracle(init, edges)
    assert np.allclose(res.poses, want, atol=1e-6)
    assert res.gradient_norm < 1e-6


@pytest.mark.parametrize("seed", range(6))
def test_random_graphs_match_oracle(seed):
    rng = np.random.default_rng(seed)
    init, edges = random_graph(rng, 8, 3, loop_noise=0.3 if seed % 2 else 0.02)
    res = optimize_graph(_graph(init, edges), tol=1e-12)
    want = graph_oracle(init, edges)
    err = res.poses - want
    err[:, 2] = [math.remainder(a, 2 * math.pi) for a in err[:, 2]]
    assert np.abs(err).max() < 1e-6
    assert res.gradient_norm < 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_chi2_history_never_increases(seed):
    init, edges = random_graph(np.random.default_rng(seed + 10), 15, 5, loop_noise=0.5)
    res = optimize_graph(_graph(init, edges))
    assert all(b <= a for a, b in zip(res.chi2_history, res.chi2_history[1:]))
    assert res.chi2 == pytest.approx(chi2_of(_graph(res.poses, edges)), rel=1e-12)


def test_gauge_invariance_under_rigid_transform():
    init, edges = random_graph(np.random.default_rng(5), 10, 3)
    T = np.array([3.0, -1.5, 0.8])
    moved = np.array([se2.compose(T, p) for p in init])
    a = optimize_graph(_graph(init, edges), tol=1e-12).poses
    b = optimize_graph(_graph(moved, edges), tol=1e-12).poses
    back = np.array([se2.compose(se2.inverse(T), p) for p in b])
    err = back - a
    err[:, 2] = [math.remainder(v, 2 * math.pi) for v in err[:, 2]]
    assert np.abs(err).max() < 1e-9


def test_disconnected_graph_is_singular():
    g = PoseGraph()
    for _ in range(4):
        g.add_node([0.0, 0.0, 0.0])
    g.add_odom_edge(0, 1, [1, 0, 0], np.eye(3))
    g.add_odom_edge(2, 3, [1, 0, 0], np.eye(3))
    with pytest.raises(SingularGraphError):
        optimize_graph(g)


def test_edge_validation():
    g = PoseGraph()
    g.add_node([0, 0, 0])
    g.add_node([1, 0, 0])
    with pytest.raises(GraphError):
        g.add_odom_edge(0, 1, [1, 0, 0], np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(GraphError):
        g.add_odom_edge(0, 1, [1, 0, 0], [[1, 2, 0], [0, 1, 0], [0, 0, 1]])
    with pytest.raises(GraphError):
        g.add_loop_edge(0, 5, [1, 0, 0], np.eye(3))
    with pytest.raises(GraphError):
        g.add_odom_edge(1, 0, [1, 0, 0], np.eye(3))


def test_loop_edge_outlier_is_down_weighted():
    init, edges = _square()
    bad = list(edges)
    bad[-1] = (3, 0, np.array([1.5, -0.7, 0.9]), np.diag([100.0, 100.0, 400.0]), True)
    robust = optimize_graph(_graph(init, bad), tol=1e-12).poses
    assert np.allclose(robust, graph_oracle(init, bad), atol=1e-6)
    # A huge delta switches the kernel off; plain least squares drifts further from odometry.
    plain = optimize_graph(_graph(init, bad), tol=1e-12, delta=1e9).poses
    assert np.allclose(plain, graph_oracle(init, bad, delta=1e9), atol=1e-6)
    assert np.abs(robust - init).max() < np.abs(plain - init).max()


def test_g2o_round_trip():
    init, edges = random_graph(np.random.default_rng(3), 6, 2)
    g = _graph(init, edges)
    text = dumps_g2o(g)
    back = loads_g2o(text)
    assert dumps_g2o(back) == text
    assert len(back.loop_edges) == len(g.loop_edges)
    assert np.array_equal(back.poses(), g.poses())


@pytest.mark.parametrize("text", ["VERTEX_SE2 0 1 2\n", "EDGE_SE2 0 1 1 0 0 1 0 0\n", "FOO 1\n",
                                  "VERTEX_SE2 1 0 0 0\n"])
def test_g2o_parse_errors(text):
    with pytest.raises(GraphError):
        loads_g2o(text)


def test_graph_csv_headers():
    init, edges = _square()
    g = _graph(init, edges)
    assert nodes_csv(g).splitlines()[0] == "id,stamp,x,y,yaw"
    rows = edges_csv(g).splitlines()
    assert rows[0] == "i,j,dx,dy,dyaw,loop" and rows[-1].endswith(",1")


def test_oracle_helpers_are_inverse():
    p = np.array([0.3, -2.0, 2.5])
    assert np.allclose(unhom(hom(p)), p)
