"""Revisit detection: proximity (radius) test and scan-verified loop closures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import se2
from .occupancy import OccupancyGrid, integrate_scan
from .posegraph import PoseGraph
from .scanmatch import MatchParams, ScanMatchError, scan_match


@dataclass(frozen=True)
class LoopParams:
    gap_min: int = 20
    radius: float = 1.0
    min_score: float = 0.6
    submap_half_width: int = 4
    max_candidates: int = 2
    cell_size: float = 0.05


@dataclass(frozen=True)
class LoopCandidate:
    query: int
    match: int
    relative_pose: np.ndarray
    score: float


@dataclass
class LoopDetection:
    candidates: list[LoopCandidate] = field(default_factory=list)
    # Node ids passing the radius test alone.
    proximity: list[int] = field(default_factory=list)
    # Best match score per evaluated node id.
    scores: dict[int, float] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.candidates)

    def __len__(self):
        return len(self.candidates)


def build_submap(graph: PoseGraph, center: int, half_width: int, cell_size: float,
                 exclude_from: int | None = None) -> OccupancyGrid | None:
    lo = max(0, center - half_width)
    hi = min(len(graph.nodes), center + half_width + 1)
    if exclude_from is not None:
        hi = min(hi, exclude_from)
    nodes = [n for n in graph.nodes[lo:hi] if n.scan is not None]
    if not nodes:
        return None
    clouds = [se2.transform_points(n.pose, n.scan.points()) for n in nodes]
    allpts = np.concatenate(clouds + [np.stack([n.pose[:2] for n in nodes])])
    grid = OccupancyGrid.around(allpts, cell_size, margin=1.0)
    for n in nodes:
        integrate_scan(grid, n.scan, n.pose)
    return grid


def proximity_nodes(graph: PoseGraph, query: int, params: LoopParams) -> list[int]:
    q = graph.nodes[query].pose
    out = []
    for n in graph.nodes[:max(0, query - params.gap_min + 1)]:
        if math.hypot(n.pose[0] - q[0], n.pose[1] - q[1]) <= params.radius:
            out.append(n.id)
    return out


def detect_loop(graph: PoseGraph, query: int, params: LoopParams | None = None,
                match_params: MatchParams | None = None) -> LoopDetection:
    """Find earlier nodes that the vehicle is revisiting.

    Every node at least ``gap_min`` steps back whose estimate lies within
    ``radius`` is a proximity event.  The nearest few of those are then
    verified by matching the query scan against a submap built around them;
    matches scoring at least ``min_score`` become loop candidates.
    """
    params = params or LoopParams()
    qnode = graph.nodes[query]
    if qnode.scan is None:
        raise ValueError(f"node {query} has no scan attached")
    result = LoopDetection()
    result.proximity = proximity_nodes(graph, query, params)
    if not result.proximity:
        return result

    q = qnode.pose
    ranked = sorted(result.proximity, key=lambda i: (math.hypot(*(graph.nodes[i].pose[:2] - q[:2])), i))
    chosen: list[int] = []
    for i in ranked:
        if all(abs(i - c) > params.submap_half_width for c in chosen):
            chosen.append(i)
        if len(chosen) >= params.max_candidates:
            break

    for m in chosen:
        submap = build_submap(graph, m, params.submap_half_width, params.cell_size,
                              exclude_from=query - params.gap_min + 1)
        if submap is None:
            continue
        try:
            refined, score = scan_match(qnode.scan, submap, q, match_params)
        except ScanMatchError:
            result.scores[m] = 0.0
            continue
        result.scores[m] = score
        if score >= params.min_score:
            rel = se2.between(graph.nodes[m].pose, refined)
            result.candidates.append(LoopCandidate(query, m, rel, score))
    return result
