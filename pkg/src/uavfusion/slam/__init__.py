"""Estimation core: pose filter, scan matching, pose graph and occupancy map."""

from .ekf import FusedPose, SingularInnovation, ekf_predict, ekf_update_odom, ekf_update_pose2d, is_psd
from .loop import LoopCandidate, LoopDetection, LoopParams, detect_loop
from .occupancy import EmptyMapError, OccupancyGrid, integrate_points, integrate_scan, map_rmse
from .posegraph import (Edge, GraphError, Node, OptimizationResult, PoseGraph, SingularGraphError,
                        edge_jacobians, edge_residual, optimize_graph)
from .scanmatch import (LowOverlapError, MatchParams, ReferenceCloud, ScanMatchError, reference_cloud, scan_match,
                        track_icp)

__all__ = [
    "FusedPose", "SingularInnovation", "ekf_predict", "ekf_update_odom", "ekf_update_pose2d", "is_psd",
    "LoopCandidate", "LoopDetection", "LoopParams", "detect_loop",
    "EmptyMapError", "OccupancyGrid", "integrate_points", "integrate_scan", "map_rmse",
    "Edge", "GraphError", "Node", "OptimizationResult", "PoseGraph", "SingularGraphError",
    "edge_jacobians", "edge_residual", "optimize_graph",
    "LowOverlapError", "MatchParams", "ReferenceCloud", "ScanMatchError", "reference_cloud", "scan_match",
    "track_icp",
]
