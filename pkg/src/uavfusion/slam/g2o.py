"""Plain-text pose graph exchange: g2o ``VERTEX_SE2`` / ``EDGE_SE2`` records."""

from __future__ import annotations

import numpy as np

from .posegraph import GraphError, PoseGraph

# Upper-triangular order used by g2o for a 3x3 information matrix.
_TRIU = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_g2o(graph: PoseGraph, poses: np.ndarray | None = None) -> str:
    poses = graph.poses() if poses is None else poses
    lines = []
    for n, p in zip(graph.nodes, poses):
        lines.append(" ".join(["VERTEX_SE2", str(n.id)] + [_fmt(v) for v in p]))
    if graph.nodes:
        lines.append("FIX 0")
    for e in graph.edges:
        info = [_fmt(e.information[i, j]) for i, j in _TRIU]
        rec = ["EDGE_SE2", str(e.i), str(e.j)] + [_fmt(v) for v in e.z] + info
        if e.loop:
            rec.append("# loop")
        lines.append(" ".join(rec))
    return "\n".join(lines) + "\n"


def loads_g2o(text: str) -> PoseGraph:
    """Inverse of ``dumps_g2o``.

    Edges between consecutive nodes become odometry edges unless tagged
    ``# loop``; any other edge is a loop edge.
    """
    verts: dict[int, np.ndarray] = {}
    raw_edges = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body, _, comment = line.partition("#")
        tok = body.split()
        if not tok:
            continue
        try:
            if tok[0] == "VERTEX_SE2":
                if len(tok) != 5:
                    raise ValueError("vertex needs an id and 3 values")
                verts[int(tok[1])] = np.array([float(v) for v in tok[2:5]])
            elif tok[0] == "EDGE_SE2":
                i, j = int(tok[1]), int(tok[2])
                if len(tok) != 12:
                    raise ValueError("edge needs 2 ids, 3 values and 6 information entries")
                z = np.array([float(v) for v in tok[3:6]])
                vals = [float(v) for v in tok[6:12]]
                info = np.zeros((3, 3))
                for (a, b), v in zip(_TRIU, vals):
                    info[a, b] = info[b, a] = v
                raw_edges.append((i, j, z, info, "loop" in comment))
            elif tok[0] == "FIX":
                continue
            else:
                raise ValueError(f"unknown record {tok[0]}")
        except (ValueError, IndexError) as exc:
            raise GraphError(f"line {lineno}: {exc}") from exc
    ids = sorted(verts)
    if ids != list(range(len(ids))):
        raise GraphError("vertex ids must be 0..n-1")
    g = PoseGraph()
    for k in ids:
        g.add_node(verts[k])
    for i, j, z, info, loop in raw_edges:
        if not loop and j == i + 1:
            g.add_odom_edge(i, j, z, info)
        else:
            g.add_loop_edge(i, j, z, info)
    return g


def nodes_csv(graph: PoseGraph, poses: np.ndarray | None = None) -> str:
    poses = graph.poses() if poses is None else poses
    out = ["id,stamp,x,y,yaw"]
    for n, p in zip(graph.nodes, poses):
        out.append(f"{n.id},{n.stamp:.3f},{p[0]:.6f},{p[1]:.6f},{p[2]:.6f}")
    return "\n".join(out) + "\n"


def edges_csv(graph: PoseGraph) -> str:
    out = ["i,j,dx,dy,dyaw,loop"]
    for e in graph.edges:
        out.append(f"{e.i},{e.j},{e.z[0]:.6f},{e.z[1]:.6f},{e.z[2]:.6f},{int(e.loop)}")
    return "\n".join(out) + "\n"
