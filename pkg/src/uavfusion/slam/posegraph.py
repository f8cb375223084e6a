"""2-D pose graph and its Gauss-Newton optimiser."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg

from . import se2

HUBER_DELTA = 1.0
# A small chi^2 change alone can leave a sizeable gradient when the
# information is stiff, so convergence also needs the gradient below this.
GRAD_TOL = 1e-7


class GraphError(ValueError):
    pass


class SingularGraphError(ArithmeticError):
    """Normal equations are singular: some node is not constrained."""


@dataclass
class Node:
    id: int
    stamp: float
    pose: np.ndarray
    scan: Any = None


@dataclass
class Edge:
    i: int
    j: int
    z: np.ndarray
    information: np.ndarray
    loop: bool = False


@dataclass
class PoseGraph:
    nodes: list[Node] = field(default_factory=list)
    odom_edges: list[Edge] = field(default_factory=list)
    loop_edges: list[Edge] = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)

    @property
    def edges(self) -> list[Edge]:
        return self.odom_edges + self.loop_edges

    def poses(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, 3))
        return np.stack([n.pose for n in self.nodes])

    def set_poses(self, poses: np.ndarray) -> None:
        for n, p in zip(self.nodes, poses):
            n.pose = np.array(p, dtype=float)

    def add_node(self, pose, stamp: float = 0.0, scan=None) -> Node:
        node = Node(len(self.nodes), stamp, np.array(pose, dtype=float), scan)
        self.nodes.append(node)
        return node

    def add_odom_edge(self, i: int, j: int, z, information) -> Edge:
        if j != i + 1 or i < 0 or j >= len(self.nodes):
            raise GraphError(f"odometry edge {i}->{j} must link consecutive existing nodes")
        e = Edge(i, j, np.array(z, dtype=float), _check_info(information))
        self.odom_edges.append(e)
        return e

    def add_loop_edge(self, i: int, j: int, z, information) -> Edge:
        if i == j or not (0 <= i < len(self.nodes) and 0 <= j < len(self.nodes)):
            raise GraphError(f"loop edge {i}->{j} references missing nodes")
        e = Edge(i, j, np.array(z, dtype=float), _check_info(information), loop=True)
        self.loop_edges.append(e)
        return e


def _check_info(info) -> np.ndarray:
    info = np.array(info, dtype=float)
    if info.shape != (3, 3) or not np.allclose(info, info.T):
        raise GraphError("information matrix must be symmetric 3x3")
    if np.linalg.eigvalsh(info).min() <= 0:
        raise GraphError("information matrix must be positive definite")
    return 0.5 * (info + info.T)


# ---------------------------------------------------------------------------
# Residuals and Jacobians


def edge_residual(xi, xj, z) -> np.ndarray:
    """Error of measurement ``z`` between poses ``xi`` and ``xj``."""
    ci, si = math.cos(xi[2]), math.sin(xi[2])
    cz, sz = math.cos(z[2]), math.sin(z[2])
    dx, dy = xj[0] - xi[0], xj[1] - xi[1]
    lx = ci * dx + si * dy - z[0]
    ly = -si * dx + ci * dy - z[1]
    return np.array([
        cz * lx + sz * ly,
        -sz * lx + cz * ly,
        se2.wrap(xj[2] - xi[2] - z[2]),
    ])


def edge_jacobians(xi, xj, z) -> tuple[np.ndarray, np.ndarray]:
    ci, si = math.cos(xi[2]), math.sin(xi[2])
    cz, sz = math.cos(z[2]), math.sin(z[2])
    dx, dy = xj[0] - xi[0], xj[1] - xi[1]
    RzT = np.array([[cz, sz], [-sz, cz]])
    RiT = np.array([[ci, si], [-si, ci]])
    dRiT = np.array([[-si, ci], [-ci, -si]])
    A = np.zeros((3, 3))
    B = np.zeros((3, 3))
    RR = RzT @ RiT
    A[:2, :2] = -RR
    A[:2, 2] = RzT @ dRiT @ np.array([dx, dy])
    A[2, 2] = -1.0
    B[:2, :2] = RR
    B[2, 2] = 1.0
    return A, B


def _batch(poses: np.ndarray, I: np.ndarray, J: np.ndarray, Z: np.ndarray):
    """Residuals (m, 3) and Jacobians (m, 3, 3) for all edges at once."""
    xi, xj = poses[I], poses[J]
    ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    cz, sz = np.cos(Z[:, 2]), np.sin(Z[:, 2])
    dx, dy = xj[:, 0] - xi[:, 0], xj[:, 1] - xi[:, 1]
    lx = ci * dx + si * dy - Z[:, 0]
    ly = -si * dx + ci * dy - Z[:, 1]
    e = np.stack([
        cz * lx + sz * ly,
        -sz * lx + cz * ly,
        se2.wrap(xj[:, 2] - xi[:, 2] - Z[:, 2]),
    ], axis=1)
    # R_z^T R_i^T = rotation by -(theta_i + theta_z)
    ca, sa = np.cos(xi[:, 2] + Z[:, 2]), np.sin(xi[:, 2] + Z[:, 2])
    m = len(I)
    A = np.zeros((m, 3, 3))
    B = np.zeros((m, 3, 3))
    A[:, 0, 0] = -ca
    A[:, 0, 1] = -sa
    A[:, 1, 0] = sa
    A[:, 1, 1] = -ca
    # d/dtheta_i of R_z^T R_i^T (t_j - t_i)
    A[:, 0, 2] = -sa * dx + ca * dy
    A[:, 1, 2] = -ca * dx - sa * dy
    A[:, 2, 2] = -1.0
    B[:, 0, 0] = ca
    B[:, 0, 1] = sa
    B[:, 1, 0] = -sa
    B[:, 1, 1] = ca
    B[:, 2, 2] = 1.0
    return e, A, B


def huber(s: np.ndarray, delta: float = HUBER_DELTA) -> tuple[np.ndarray, np.ndarray]:
    """Huber kernel on squared whitened error ``s``: returns (rho, rho')."""
    d2 = delta * delta
    root = np.sqrt(np.maximum(s, 1e-300))
    rho = np.where(s <= d2, s, 2.0 * delta * root - d2)
    w = np.where(s <= d2, 1.0, delta / root)
    return rho, w


@dataclass
class _Packed:
    I: np.ndarray
    J: np.ndarray
    Z: np.ndarray
    Omega: np.ndarray
    robust: np.ndarray


def _pack(graph: PoseGraph) -> _Packed:
    edges = graph.edges
    if not edges:
        return _Packed(np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)),
                       np.zeros((0, 3, 3)), np.zeros(0, bool))
    return _Packed(
        np.array([e.i for e in edges]),
        np.array([e.j for e in edges]),
        np.stack([e.z for e in edges]),
        np.stack([e.information for e in edges]),
        np.array([e.loop for e in edges]),
    )


def graph_cost(poses: np.ndarray, packed: _Packed, delta: float = HUBER_DELTA) -> float:
    if len(packed.I) == 0:
        return 0.0
    e, _, _ = _batch(poses, packed.I, packed.J, packed.Z)
    s = np.einsum("mi,mij,mj->m", e, packed.Omega, e)
    rho, _ = huber(s, delta)
    return float(np.sum(np.where(packed.robust, rho, s)))


def _normal_equations(poses, packed, delta):
    n = len(poses)
    e, A, B = _batch(poses, packed.I, packed.J, packed.Z)
    s = np.einsum("mi,mij,mj->m", e, packed.Omega, e)
    _, w = huber(s, delta)
    w = np.where(packed.robust, w, 1.0)
    Om = packed.Omega * w[:, None, None]
    # Gradient weights are rho' * Omega.  In the linear zone the kernel has
    # no curvature along the error direction, so the curvature weight drops
    # that rank-one part; plain reweighting would converge only linearly.
    lin = packed.robust & (s > delta * delta)
    Oe = np.einsum("mij,mj->mi", packed.Omega, e)
    Oc = Om.copy()
    if lin.any():
        Oc[lin] -= (w[lin] / s[lin])[:, None, None] * np.einsum("mi,mj->mij", Oe[lin], Oe[lin])
    AtO = np.einsum("mki,mkl->mil", A, Oc)
    BtO = np.einsum("mki,mkl->mil", B, Oc)
    Hii = np.einsum("mil,mlj->mij", AtO, A)
    Hij = np.einsum("mil,mlj->mij", AtO, B)
    Hjj = np.einsum("mil,mlj->mij", BtO, B)
    g = Oe * w[:, None]
    bi = np.einsum("mki,mk->mi", A, g)
    bj = np.einsum("mki,mk->mi", B, g)

    H = np.zeros((n, 3, n, 3))
    b = np.zeros((n, 3))
    np.add.at(H, (packed.I, slice(None), packed.I), Hii)
    np.add.at(H, (packed.J, slice(None), packed.J), Hjj)
    np.add.at(H, (packed.I, slice(None), packed.J), Hij)
    np.add.at(H, (packed.J, slice(None), packed.I), Hij.transpose(0, 2, 1))
    np.add.at(b, packed.I, bi)
    np.add.at(b, packed.J, bj)
    return H.reshape(3 * n, 3 * n), b.reshape(3 * n)


@dataclass
class OptimizationResult:
    poses: np.ndarray
    chi2: float
    iterations: int
    chi2_history: list[float]
    gradient_norm: float
    converged: bool


def optimize_graph(graph: PoseGraph, max_iterations: int = 100, tol: float = 1e-9,
                   delta: float = HUBER_DELTA, initial: np.ndarray | None = None) -> OptimizationResult:
    """Gauss-Newton over all poses with node 0 held fixed.

    Loop-closure edges go through a Huber kernel.
    A step that would raise chi^2 is rejected and retried with
    Levenberg-style damping, so the accepted chi^2 sequence never
    increases.  Stops once an accepted step changes chi^2 by less than
    ``tol`` and the gradient norm is below ``GRAD_TOL`` (or has stopped
    shrinking), when no step can lower chi^2 any more, or after
    ``max_iterations``.
    """
    poses = graph.poses() if initial is None else np.array(initial, dtype=float)
    n = len(poses)
    packed = _pack(graph)
    chi2 = graph_cost(poses, packed, delta)
    history = [chi2]
    if n <= 1 or len(packed.I) == 0:
        return OptimizationResult(poses, chi2, 0, history, 0.0, True)
    _check_connected(n, packed)

    lam = 0.0
    converged = False
    it = 0
    grad = np.inf
    change = np.inf
    while it < max_iterations:
        H, b = _normal_equations(poses, packed, delta)
        Hf, bf = H[3:, 3:], b[3:]
        prev, grad = grad, float(np.linalg.norm(bf))
        # Past the chi^2 tolerance, keep going only while the gradient still shrinks.
        if change < tol and (grad < GRAD_TOL or grad > 0.5 * prev):
            converged = True
            break
        it += 1
        step_taken = False
        while True:
            Hd = Hf + lam * np.diag(np.diag(Hf)) if lam > 0 else Hf
            try:
                cf = scipy.linalg.cho_factor(Hd, check_finite=False)
                dx = -scipy.linalg.cho_solve(cf, bf, check_finite=False)
            except np.linalg.LinAlgError as exc:
                if lam == 0.0 and np.linalg.matrix_rank(Hf) < Hf.shape[0]:
                    raise SingularGraphError("normal equations are singular") from exc
                lam = max(1e-6, lam * 10.0)
                if lam > 1e12:
                    raise SingularGraphError("normal equations are singular") from exc
                continue
            cand = poses.copy()
            cand[1:] += dx.reshape(-1, 3)
            cand[:, 2] = se2.wrap(cand[:, 2])
            new = graph_cost(cand, packed, delta)
            if new <= chi2:
                step_taken = True
                break
            lam = max(1e-6, lam * 10.0)
            if lam > 1e12:
                break
        if not step_taken:
            converged = True
            break
        change = chi2 - new
        poses, chi2 = cand, new
        history.append(chi2)
        lam = lam / 10.0 if lam > 1e-6 else 0.0
    H, b = _normal_equations(poses, packed, delta)
    grad = float(np.linalg.norm(b[3:]))
    return OptimizationResult(poses, chi2, it, history, grad, converged)


def _check_connected(n: int, packed: _Packed) -> None:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in zip(packed.I, packed.J):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[ri] = rj
    roots = {find(k) for k in range(n)}
    if len(roots) > 1:
        raise SingularGraphError(f"graph has {len(roots)} disconnected components")


def chi2_of(graph: PoseGraph, poses: np.ndarray | None = None, delta: float = HUBER_DELTA) -> float:
    return graph_cost(graph.poses() if poses is None else poses, _pack(graph), delta)
