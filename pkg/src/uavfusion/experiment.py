"""Experiment harness: single missions, the configuration trade study,
reconstruction versus distance and attitude flight logs."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import (CONFIGURATIONS, RECONSTRUCTION_REFERENCE, TABLE1_METADATA, TABLE1_REFERENCE,
                     RunConfig, sensor_suite)
from .guidance import AttitudeGains, _atomic_write, attitude_controller, emit_trajectory_map, wrap_array
from .msgbus import graph_export, stats_csv
from .perception import depth_to_cloud, slice_cloud
from .sensors import DepthCameraSpec, sample_depth
from .sim import CONTROL_RATE, MissionResult, MissionSim
from .slam.g2o import dumps_g2o
from .slam.occupancy import RMSE_PENALTY, EmptyMapError, OccupancyGrid, coverage, integrate_points, map_rmse
from .world import (AttitudeCommand, Box, VehicleState, WorldModel, default_world, make_bounds, step_dynamics,
                    wrap)


class RunError(RuntimeError):
    """A run failed; carries the configuration and seed that caused it."""

    def __init__(self, configuration: str, seed: int, cause: BaseException):
        super().__init__(f"configuration {configuration} seed {seed}: {cause}")
        self.configuration = configuration
        self.seed = seed
        self.cause = cause


@dataclass
class MetricsReport:
    configuration: str
    seed: int
    navigation_accuracy: float
    mapping_rmse: float
    exploration_time: float
    avg_power: float
    total_energy: float
    reconstruction: list = field(default_factory=list)
    completed: bool = False
    waypoints_reached: int = 0
    map_empty: bool = False
    min_clearance: float = 0.0
    contacts: int = 0
    loop_closures: int = 0
    proximity_events: int = 0
    graph_nodes: int = 0
    covariance_psd: bool = True
    min_covariance_eig: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _map_error(grid: OccupancyGrid, world: WorldModel, z: float) -> tuple[float, bool]:
    try:
        return map_rmse(grid, world, z), False
    except EmptyMapError:
        # Nothing mapped: every surface sample costs the capped penalty.
        return RMSE_PENALTY, True


def report_from(config: RunConfig, world: WorldModel, res: MissionResult) -> MetricsReport:
    wps = config.waypoints
    final = np.asarray(wps[-1], dtype=float) if wps else res.truth.position
    z = float(final[2]) if wps else float(res.truth.position[2])
    rmse, empty = _map_error(res.fusion.grid, world, z)
    completed = res.completion_time is not None
    t_explore = res.completion_time if completed else res.end_time
    power = float(config.metadata["power_w"])
    return MetricsReport(
        configuration=config.configuration,
        seed=config.seed,
        navigation_accuracy=float(np.linalg.norm(res.truth.position - final)),
        mapping_rmse=float(rmse),
        exploration_time=float(t_explore),
        avg_power=power,
        total_energy=power * float(t_explore),
        completed=completed,
        waypoints_reached=len(res.guidance.reached),
        map_empty=empty,
        min_clearance=float(res.min_clearance),
        contacts=int(res.contacts),
        loop_closures=int(res.fusion.loop_edges),
        proximity_events=int(res.fusion.proximity_events),
        graph_nodes=len(res.fusion.graph),
        covariance_psd=bool(res.fusion.psd_ok),
        min_covariance_eig=float(res.fusion.min_eig),
    )


def simulate(config: RunConfig, base: Path | None = None) -> tuple[MetricsReport, MissionResult, WorldModel]:
    world = config.load_world(base)
    suite = config.suite()
    sim = MissionSim(world, suite, config.waypoints, config.seed,
                     duration_limit=config.duration_limit, hold_time=config.hold_time,
                     perception_products=bool(config.metrics.get("perception", True)))
    res = sim.run()
    return report_from(config, world, res), res, world


def run_mission(config: RunConfig, out_dir: str | Path | None = None,
                base: Path | None = None) -> tuple[MetricsReport, MissionResult]:
    """Simulate one mission and, with ``out_dir``, write its artifacts."""
    report, res, _ = simulate(config, base)
    if out_dir is not None:
        write_artifacts(Path(out_dir), config, report, res)
    return report, res


def write_artifacts(out: Path, config: RunConfig, report: MetricsReport, res: MissionResult) -> None:
    meta = {"config": config.to_document(), "seed": config.seed, "metrics": asdict(report),
            "end_time": res.end_time}
    emit_trajectory_map(res.trajectory, out, res.fusion.grid, meta)
    _atomic_write(out / "metrics.json", report.to_json().encode())
    if config.metrics.get("flight_log", True):
        _atomic_write(out / "flight_log.csv", flight_log_csv(res.flight.t, res.flight.desired,
                                                             res.flight.actual).encode())
    window = max(res.end_time, 1e-3)
    _atomic_write(out / "bus_stats.csv", stats_csv(res.bus.stats_rows(window, res.end_time)).encode())
    _atomic_write(out / "bus_graph.json", (graph_export(res.bus) + "\n").encode())
    if len(res.fusion.graph):
        _atomic_write(out / "pose_graph.g2o", dumps_g2o(res.fusion.graph).encode())


# ---------------------------------------------------------------------------
# Configuration trade study

TABLE_ROWS = [
    ("Navigation Accuracy (m)", "navigation_accuracy"),
    ("Mapping Quality (RMSE)", "mapping_rmse"),
    ("Exploration Time (s)", "exploration_time"),
    ("Average Power (W)", "avg_power"),
    ("Total Energy Consumption (Joules)", "total_energy"),
]
META_ROWS = [("Cost", "cost"), ("Weight (kg)", "mass_kg")]


@dataclass
class Table1Result:
    configs: list
    seeds: list
    reports: dict                       # configuration -> list of MetricsReport (seed order)
    ordering: dict = field(default_factory=dict)

    def mean(self, cfg: str, key: str) -> float:
        return float(np.mean([getattr(r, key) for r in self.reports[cfg]]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["metric"]
        for c in self.configs:
            head += [f"{c}_sim", f"{c}_reference"]
        w.writerow(head)
        for label, key in TABLE_ROWS:
            row = [label]
            for c in self.configs:
                row += [f"{self.mean(c, key):.4f}", f"{TABLE1_REFERENCE[c][key]:g}"]
            w.writerow(row)
        for label, key in META_ROWS:
            row = [label]
            for c in self.configs:
                v = f"{TABLE1_METADATA[c][key]:g}"
                row += [v, v]
            w.writerow(row)
        return buf.getvalue()


def _run_one(args) -> MetricsReport:
    cfg, seed, overrides = args
    config = RunConfig(configuration=cfg, seed=seed, **overrides)
    try:
        report, _, _ = simulate(config)
    except Exception as exc:
        raise RunError(cfg, seed, exc) from exc
    return report


def ordering_counts(reports: dict, seeds: list) -> dict:
    """Per-seed count of runs where C <= B <= A, for accuracy and map RMSE."""
    out = {}
    if not all(c in reports for c in CONFIGURATIONS):
        return out
    for key in ("navigation_accuracy", "mapping_rmse"):
        ok = 0
        for i in range(len(seeds)):
            a, b, c = (getattr(reports[k][i], key) for k in CONFIGURATIONS)
            ok += int(c <= b <= a)
        out[key] = ok
    return out


def eval_table1(configs=CONFIGURATIONS, seeds=range(10), jobs: int = 1,
                overrides: dict | None = None, min_seeds: int = 5) -> Table1Result:
    configs = list(configs)
    seeds = list(seeds)
    if len(seeds) < min_seeds:
        raise ValueError(f"need at least {min_seeds} seeds, got {len(seeds)}")
    for c in configs:
        if c not in CONFIGURATIONS:
            raise ValueError(f"unknown configuration {c!r}")
    tasks = [(c, s, overrides or {}) for c in configs for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    reports = {c: [] for c in configs}
    for (c, _, _), r in zip(tasks, results):
        reports[c].append(r)
    res = Table1Result(configs, seeds, reports)
    if len(configs) == len(CONFIGURATIONS):
        res.ordering = ordering_counts(reports, seeds)
    return res


# ---------------------------------------------------------------------------
# Reconstruction versus distance


@dataclass(frozen=True)
class ReconstructionRow:
    distance: float
    percent: float | None               # None = target outside the depth range
    reference: float | None

    @property
    def applicable(self) -> bool:
        return self.percent is not None


TARGET_WIDTH = 0.8
_CAMERA = np.array([5.0, 15.0, -1.2])


def reconstruction_world(distance: float, width: float = TARGET_WIDTH, cell_size: float = 0.05) -> WorldModel:
    """Open 30 x 30 x 5 m hall with a single wall panel ``distance`` ahead of the camera."""
    fx = _CAMERA[0] + distance
    cy = _CAMERA[1]
    panel = Box([fx, cy - width / 2, -5.0], [fx + 0.1, cy + width / 2, 0.0])
    return WorldModel(make_bounds([30.0, 30.0, 5.0]), (panel,), cell_size)


def reconstruction_percent(distance: float, seed: int, spec: DepthCameraSpec | None = None,
                           width: float = TARGET_WIDTH, cell_size: float = 0.05, band: float = 0.25) -> float:
    """Percent of the panel's front-face samples within 1.5 cells of a mapped-occupied cell."""
    spec = spec or DepthCameraSpec()
    world = reconstruction_world(distance, width, cell_size)
    truth = VehicleState(position=_CAMERA.copy())
    img = sample_depth(world, truth, spec, np.random.default_rng(seed))
    cloud = depth_to_cloud(img, truth.position, truth.attitude)
    pts = slice_cloud(cloud, truth.position[2], band)
    grid = OccupancyGrid.covering(world, margin=0.0)
    if len(pts):
        integrate_points(grid, truth.position[:2], pts)
    fx = _CAMERA[0] + distance
    n = int(math.ceil(width / (cell_size / 2)))
    ys = _CAMERA[1] - width / 2 + (np.arange(n) + 0.5) / n * width
    face = np.stack([np.full(n, fx), ys], axis=1)
    return 100.0 * coverage(grid, face, 1.5 * cell_size)


def eval_reconstruction(distances, seeds=range(5), spec: DepthCameraSpec | None = None) -> list[ReconstructionRow]:
    spec = spec or DepthCameraSpec()
    rows = []
    for d in distances:
        d = float(d)
        ref = RECONSTRUCTION_REFERENCE.get(d)
        if not (spec.min_range <= d <= spec.max_range):
            rows.append(ReconstructionRow(d, None, ref))
            continue
        vals = [reconstruction_percent(d, s, spec) for s in seeds]
        rows.append(ReconstructionRow(d, float(np.mean(vals)), ref))
    return rows


def reconstruction_csv(rows: list[ReconstructionRow]) -> str:
    lines = ["distance_m,percent,reference_percent,status"]
    for r in rows:
        pct = f"{r.percent:.2f}" if r.applicable else ""
        ref = f"{r.reference:g}" if r.reference is not None else ""
        lines.append(f"{r.distance:g},{pct},{ref},{'ok' if r.applicable else 'not-applicable'}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Flight logs

AXES = ("roll", "pitch", "yaw")
STEADY_CRITERION = 0.1      # percent


def flight_log_csv(t, desired, actual) -> str:
    lines = ["t,des_roll,des_pitch,des_yaw,roll,pitch,yaw"]
    for ti, d, a in zip(t, desired, actual):
        lines.append(f"{ti:.3f}," + ",".join(f"{v:.9f}" for v in (*d, *a)))
    return "\n".join(lines) + "\n"


def read_flight_log(text: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:1] != ["t"]:
        raise ValueError("not a flight log")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, 7)
    return data[:, 0], data[:, 1:4], data[:, 4:7]


@dataclass
class AxisSummary:
    axis: str
    steady_ticks: int
    mean_abs_error: float
    max_abs_error: float
    normalizer: float
    error_percent: float | None
    passed: bool | None


def flight_summary(t, desired, actual, settle: float = 1.0) -> dict:
    """Steady-state tracking error per axis.

    A tick is steady when the desired angle has not changed for at least
    ``settle`` seconds.  The error is normalised by the larger of the
    desired angle's peak-to-peak span and 1 rad, and reported in percent
    using the worst steady tick.
    """
    t = np.asarray(t, dtype=float)
    des = np.asarray(desired, dtype=float).reshape(-1, 3)
    act = np.asarray(actual, dtype=float).reshape(-1, 3)
    out = {"ticks": int(len(t)), "criterion_percent": STEADY_CRITERION, "axes": {}}
    for k, name in enumerate(AXES):
        d = des[:, k]
        err = np.abs(wrap_array(act[:, k] - d))
        changed = np.ones(len(d), dtype=bool)
        changed[1:] = np.abs(wrap_array(np.diff(d))) > 1e-12
        last_change = np.maximum.accumulate(np.where(changed, t, -np.inf)) if len(t) else t
        steady = (t - last_change) >= settle - 1e-9
        span = float(np.ptp(np.unwrap(d))) if len(d) else 0.0
        norm = max(span, 1.0)
        if steady.any():
            e = err[steady]
            pct = 100.0 * float(e.max()) / norm
            s = AxisSummary(name, int(steady.sum()), float(e.mean()), float(e.max()), norm, pct,
                            pct <= STEADY_CRITERION)
        else:
            s = AxisSummary(name, 0, 0.0, 0.0, norm, None, None)
        out["axes"][name] = asdict(s)
    return out


def flight_log(run_dir: str | Path) -> dict:
    p = Path(run_dir) / "flight_log.csv"
    if not p.exists():
        raise FileNotFoundError(f"missing artifact {p}")
    t, d, a = read_flight_log(p.read_text())
    return flight_summary(t, d, a)


def attitude_step_log(axis: int, magnitude: float = 1.0, duration: float = 5.0, step_at: float = 0.5,
                      gains: AttitudeGains = AttitudeGains(), control_rate: float = CONTROL_RATE,
                      tick: float = 0.001):
    """Closed-loop step in one attitude axis: hover, then a step of ``magnitude`` rad.

    Returns ``(t, desired, actual)`` sampled at the control rate.
    """
    state = VehicleState()
    per = int(round(1.0 / (control_rate * tick)))
    n = int(round(duration * control_rate))
    ts, des, act = [], [], []
    for k in range(n):
        t = k * per * tick
        target = np.zeros(3)
        if t >= step_at:
            target[axis] = magnitude
        cmd = AttitudeCommand(roll=target[0], pitch=target[1], yaw=wrap(target[2]))
        ts.append(round(t, 9))
        des.append(target.copy())
        act.append(state.attitude.copy())
        u = attitude_controller(cmd, state, gains)
        state = step_dynamics(state, u, per * tick)
    return np.array(ts), np.array(des), np.array(act)


# ---------------------------------------------------------------------------
# Bus budgets


@dataclass(frozen=True)
class BudgetRow:
    topic: str
    nominal_hz: float
    hz: float
    nominal_bw: float
    bw: float

    @property
    def hz_error(self) -> float:
        return self.hz / self.nominal_hz - 1.0

    @property
    def bw_error(self) -> float:
        return self.bw / self.nominal_bw - 1.0


def bus_budget(configuration: str = "C", seed: int = 0, duration: float = 60.0) -> list[BudgetRow]:
    """Hover for ``duration`` virtual seconds and measure every topic over that window."""
    config = RunConfig(configuration=configuration, seed=seed, waypoints=[], duration_limit=duration,
                       hold_time=math.inf)
    world = config.load_world()
    sim = MissionSim(world, config.suite(), [], seed, duration_limit=duration, hold_time=math.inf)
    res = sim.run()
    rows = []
    for name in sorted(res.bus.topics):
        spec = res.bus.topics[name]
        hz = res.bus.topic_hz(name, duration, duration)
        bw = res.bus.topic_bw(name, duration, duration)
        rows.append(BudgetRow(name, spec.nominal_rate, hz, spec.nominal_bandwidth, bw))
    return rows


# ---------------------------------------------------------------------------
# Loop-closure benefit


@dataclass
class LoopRun:
    seed: int
    dead_reckoning_rmse: float
    optimized_rmse: float
    loop_edges: int
    false_edges: int
    nodes: int


def aligned_rmse(est: np.ndarray, truth: np.ndarray) -> float:
    """Position RMSE after the best rigid 2-D alignment of ``est`` onto ``truth``."""
    a = np.asarray(est, dtype=float)[:, :2]
    b = np.asarray(truth, dtype=float)[:, :2]
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    u, _, vt = np.linalg.svd((a - ca).T @ (b - cb))
    d = np.sign(np.linalg.det(vt.T @ u.T))
    R = vt.T @ np.diag([1.0, d]) @ u.T
    r = (a - ca) @ R.T + cb - b
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def path_poses(waypoints, spacing: float = 0.3, turn_step: float = math.radians(30.0)) -> np.ndarray:
    """Poses every ``spacing`` metres along a polyline, turning on the spot at corners."""
    wps = [np.asarray(w, dtype=float)[:2] for w in waypoints]
    out = []
    yaw = math.atan2(*(wps[1] - wps[0])[::-1])
    for a, b in zip(wps[:-1], wps[1:]):
        seg = b - a
        target = math.atan2(seg[1], seg[0])
        turn = wrap(target - yaw)
        steps = int(math.ceil(abs(turn) / turn_step))
        for k in range(1, steps):
            out.append([a[0], a[1], wrap(yaw + turn * k / steps)])
        yaw = target
        n = max(1, int(round(np.linalg.norm(seg) / spacing)))
        for k in range(n):
            p = a + seg * k / n
            out.append([p[0], p[1], yaw])
    last = wps[-1]
    out.append([last[0], last[1], yaw])
    return np.array(out)


def corridor_world(length: float = 30.0, width: float = 3.0, pillar_every: float = 2.0) -> WorldModel:
    """Long corridor with identical pillars on both walls, a self-similar layout."""
    obs = []
    x = 1.0
    while x + 0.3 < length - 0.5:
        obs.append(Box([x, 0.0, -3.0], [x + 0.3, 0.3, 0.0]))
        obs.append(Box([x, width - 0.3, -3.0], [x + 0.3, width, 0.0]))
        x += pillar_every
    return WorldModel(make_bounds([length, width, 5.0]), tuple(obs), 0.05)


SQUARE_LOOP = [(0.9, 0.9), (6.1, 0.9), (6.1, 6.1), (0.9, 6.1), (0.9, 0.9), (3.5, 0.9)]
STRAIGHT_LINE = [(1.0, 1.5), (28.5, 1.5)]


def loop_benefit(seed: int, path=SQUARE_LOOP, world: WorldModel | None = None,
                 drift=None, false_tolerance: float = 0.3) -> LoopRun:
    """Pose-graph SLAM on truth scans with drifting odometry.

    ``drift`` is an ``OdomDrift`` (configuration C's by default): odometry
    increments get its scale error, heading bias and random walks.  Loop
    edges are checked against ground truth: an edge whose relative position
    is off by more than ``false_tolerance`` metres counts as false.
    """
    from .sensors import LidarSpec, sample_lidar
    from .slam import se2
    from .slam.loop import LoopParams, detect_loop
    from .slam.posegraph import PoseGraph, optimize_graph

    world = world or default_world()
    drift = drift or sensor_suite("C").odom
    rng = np.random.default_rng(seed)
    truth = path_poses(path)
    scale, bias = drift.scale, drift.yaw_bias_per_m
    trans_sigma, yaw_rw_sigma = drift.trans_sigma, drift.yaw_rw_sigma
    lidar = LidarSpec()
    lidar_rng = np.random.default_rng([seed, 1])
    params = LoopParams()
    loop_info = np.diag([1.0 / 0.05 ** 2, 1.0 / 0.05 ** 2, 1.0 / math.radians(2.0) ** 2])

    graph = PoseGraph()
    dr = [truth[0].copy()]
    loops = false = 0
    for i, T in enumerate(truth):
        st = VehicleState(position=np.array([T[0], T[1], -1.2]), attitude=np.array([0.0, 0.0, T[2]]))
        scan = sample_lidar(world, st, lidar, lidar_rng)
        if i > 0:
            z = se2.between(truth[i - 1], T)
            d = math.hypot(z[0], z[1])
            zn = np.array([z[0] * scale, z[1] * scale, z[2] + bias * d])
            zn[:2] += rng.normal(0.0, trans_sigma * math.sqrt(d) + 1e-4, 2)
            zn[2] = wrap(zn[2] + rng.normal(0.0, yaw_rw_sigma * math.sqrt(d) + 1e-4))
            dr.append(se2.compose(dr[-1], zn))
            var_t = trans_sigma ** 2 * max(d, 0.05) + 1e-6
            var_r = yaw_rw_sigma ** 2 * max(d, 0.05) + 1e-4
            graph.add_node(dr[-1], float(i), scan)
            graph.add_odom_edge(i - 1, i, zn, np.diag([1.0 / var_t, 1.0 / var_t, 1.0 / var_r]))
        else:
            graph.add_node(dr[0], 0.0, scan)
        # Detection sees the current best estimate of every pose.
        for cand in detect_loop(graph, i, params):
            graph.add_loop_edge(cand.match, cand.query, cand.relative_pose, loop_info)
            loops += 1
            err = se2.between(truth[cand.match], truth[cand.query])[:2] - cand.relative_pose[:2]
            false += int(np.hypot(*err) > false_tolerance)
    dead = np.array(dr)
    est = optimize_graph(graph).poses if graph.loop_edges else dead
    return LoopRun(seed, aligned_rmse(dead, truth), aligned_rmse(est, truth), loops, false, len(truth))
