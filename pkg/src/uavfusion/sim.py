"""Multi-rate discrete-event simulation wiring sensors, fusion and guidance.

Every periodic task fires on integer ticks of the virtual clock: the k-th
event of a task with rate ``f`` lands on tick ``round(k / (f * tick))``, so
long-run rates are exact.  The plant is advanced lazily to each event with
the actuator command held constant in between.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import SensorSuite
from .guidance import (AttitudeGains, GuidanceParams, GuidanceState, Mode, TrajectoryMap,
                       attitude_controller, guidance_step)
from .msgbus import MessageBus, PayloadKind, TopicSpec
from .perception import (PointCloud, canny_edges, confidence_from_depth, depth_to_cloud,
                         depth_to_gray, depth_to_scan, slice_cloud)
from .sensors import (DepthImage, ImuSample, LaserScan, OdomSample, init_odom, sample_depth, sample_imu,
                      sample_lidar, sample_odom)
from .slam import se2
from .slam.ekf import DEFAULT_Q, NO_GYRO_Q, FusedPose, SingularInnovation, ekf_predict, ekf_update_odom
from .slam.loop import LoopParams, detect_loop
from .slam.occupancy import OccupancyGrid, integrate_points, integrate_scan
from .slam.posegraph import PoseGraph, SingularGraphError, optimize_graph
from .slam.scanmatch import reference_cloud, track_icp
from .world import AttitudeCommand, VehicleState, VirtualClock, WorldModel, step_dynamics

# Topic names.
SCAN = "/scan"
ODOM = "zed_node/odom"
IMU = "zed_node/imu/data"
DEPTH = "zed_node/depth/depth_registered"
CLOUD = "point_cloud/cloud_reg"
CONFIDENCE = "zed_node/confidence/confidence_map"
EDGES = "edge_detector/edges"
DEPTH_SCAN = "depth_to_scan/scan"
FUSED = "rtabmap/odom"
ATTITUDE = "mavros/setpoint_raw/attitude"

CONTROL_RATE = 50.0


# ---------------------------------------------------------------------------
# Scheduler


@dataclass
class PeriodicTask:
    name: str
    rate: float
    priority: int
    fn: Callable[[float], None]
    k: int = 0

    def tick_of(self, k: int, tick: float) -> int:
        return int(round(k / (self.rate * tick)))


class Scheduler:
    """Earliest-tick-first event loop; ties break on task priority."""

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self._heap: list[tuple[int, int, int, PeriodicTask]] = []
        self._order = 0
        self.before_event: Callable[[int], None] | None = None

    def add(self, task: PeriodicTask) -> None:
        t = task.tick_of(task.k, self.clock.tick)
        heapq.heappush(self._heap, (t, task.priority, self._order, task))
        self._order += 1

    def run(self, until_tick: int, inclusive: bool = True,
            stop: Callable[[], bool] | None = None) -> None:
        while self._heap:
            t, _, _, task = self._heap[0]
            if t > until_tick or (t == until_tick and not inclusive):
                break
            heapq.heappop(self._heap)
            if t > self.clock.ticks:
                self.clock.ticks = t
            if self.before_event is not None:
                self.before_event(t)
            task.fn(self.clock.now)
            task.k += 1
            self.add(task)
            if stop is not None and stop():
                break


def standard_topics(suite: SensorSuite | None = None) -> list[TopicSpec]:
    """Topic table for a sensor suite (every topic when ``suite`` is None)."""
    depth_rate = suite.depth.rate if suite else 6.18
    odom_rate = suite.odom.rate if suite else 7.59
    topics = [
        TopicSpec(ODOM, PayloadKind.Odometry, odom_rate),
        TopicSpec(DEPTH, PayloadKind.DepthImage, depth_rate),
        TopicSpec(CLOUD, PayloadKind.PointCloud, depth_rate),
        TopicSpec(CONFIDENCE, PayloadKind.ConfidenceMap, depth_rate),
        TopicSpec(EDGES, PayloadKind.EdgeImage, depth_rate),
        TopicSpec(FUSED, PayloadKind.Odometry, CONTROL_RATE),
        TopicSpec(ATTITUDE, PayloadKind.AttitudeCommand, CONTROL_RATE),
    ]
    if suite is None or suite.imu is not None:
        topics.append(TopicSpec(IMU, PayloadKind.Imu, suite.imu.rate if suite else 300.31))
    if suite is None or suite.lidar is not None:
        topics.append(TopicSpec(SCAN, PayloadKind.LaserScan, suite.lidar.rate if suite else 6.4))
    if suite is None or suite.lidar is None:
        topics.append(TopicSpec(DEPTH_SCAN, PayloadKind.LaserScan, depth_rate))
    return topics


# ---------------------------------------------------------------------------
# Fusion


@dataclass(frozen=True)
class FusionParams:
    node_distance: float = 0.3
    node_angle: float = math.radians(15.0)
    scan_sigma: tuple[float, float, float] = (0.03, 0.03, math.radians(1.0))
    loop_sigma: tuple[float, float, float] = (0.05, 0.05, math.radians(2.0))
    min_track_score: float = 0.4         # fraction of beams paired with the reference
    track_keyframes: int = 8
    optimize_every: int = 10            # nodes between optimisations once a closure is pending
    cloud_band: float = 0.25            # m, height band of depth points used for the 2-D map
    odom_floor: float = 1e-6            # variance floor on odometry-edge information


class FusionNode:
    """Pose filter in the odometry frame plus, with LiDAR, map-frame SLAM.

    The filter tracks the vehicle in the drifting odometry frame.  With a
    LiDAR the SLAM back end keeps a map-from-odometry correction ``corr``
    estimated by scan-to-map tracking and pose-graph optimisation; the
    published fused pose is ``corr`` composed with the filter pose.
    """

    def __init__(self, suite: SensorSuite, world: WorldModel, start: VehicleState,
                 params: FusionParams | None = None):
        self.suite = suite
        self.params = params or FusionParams()
        pose = np.concatenate([start.position, start.attitude])
        self.ekf = FusedPose(0.0, pose.astype(float), np.zeros((6, 6)), np.zeros(3))
        self.q = DEFAULT_Q if suite.imu is not None else NO_GYRO_Q
        self.last_gyro = None
        self.last_odom: OdomSample | None = None
        self.corr = np.zeros(3)
        self.grid = OccupancyGrid.covering(world)
        self.graph = PoseGraph()
        self.ref = None
        self.node_odom: list[np.ndarray] = []
        self.node_distance_acc: list[float] = []
        self.loop_params = LoopParams(cell_size=world.cell_size)
        self.pending_closure = False
        self.nodes_since_opt = 0
        self.loop_edges = 0
        self.proximity_events = 0
        self.optimizations = 0
        self.psd_ok = True
        self.min_eig = 0.0
        self.updates = 0
        self.skipped_updates = 0
        # (stamp, fused pose, filter pose) right after each odometry update.
        self.odom_instants: list[tuple[float, np.ndarray, np.ndarray]] = []

    # -- filter --------------------------------------------------------------

    def _check(self):
        P = self.ekf.covariance
        ev = float(np.linalg.eigvalsh(P)[0])
        self.min_eig = min(self.min_eig, ev)
        if ev < -1e-12 or not np.array_equal(P, P.T):
            self.psd_ok = False

    def predict_to(self, t: float) -> None:
        dt = t - self.ekf.stamp
        if dt > 1e-12:
            self.ekf = ekf_predict(self.ekf, self.last_gyro, dt, self.q)
            self._check()

    def on_imu(self, imu: ImuSample) -> None:
        self.predict_to(imu.stamp)
        self.last_gyro = imu.gyro

    def on_odom(self, odom: OdomSample) -> None:
        self.predict_to(odom.stamp)
        prev = self.last_odom
        if prev is not None:
            dt = odom.stamp - prev.stamp
            vx = (odom.pose[0] - prev.pose[0]) / dt
            vy = (odom.pose[1] - prev.pose[1]) / dt
            c, s = math.cos(odom.pose[2]), math.sin(odom.pose[2])
            self.ekf.velocity = np.array([c * vx + s * vy, -s * vx + c * vy, (odom.z - prev.z) / dt])
        try:
            self.ekf = ekf_update_odom(self.ekf, odom)
            self.updates += 1
        except SingularInnovation:
            # Filter and measurement both exact (start-up sample): nothing to fuse.
            self.skipped_updates += 1
        self._check()
        self.last_odom = odom
        self.odom_instants.append((odom.stamp, self.fused_pose().pose.copy(), self.ekf.pose.copy()))

    def fused_pose(self) -> FusedPose:
        out = self.ekf.copy()
        p = se2.compose(self.corr, self.ekf.pose2d)
        out.pose[0], out.pose[1], out.pose[5] = p
        return out

    def fused_at(self, t: float) -> FusedPose:
        self.predict_to(t)
        return self.fused_pose()

    # -- mapping -------------------------------------------------------------

    def on_cloud(self, cloud: PointCloud) -> None:
        if self.suite.lidar is not None or cloud.origin is None or len(cloud) == 0:
            return
        pts = slice_cloud(cloud, cloud.origin[2], self.params.cloud_band)
        if len(pts):
            # One ray per endpoint cell is enough; the rest retrace the same cells.
            _, first = np.unique(self.grid.cell_of(pts), axis=0, return_index=True)
            pts = pts[np.sort(first)]
            integrate_points(self.grid, cloud.origin[:2], pts)

    def _odom_information(self, d: float, dyaw: float) -> np.ndarray:
        o = self.suite.odom
        var_xy = o.trans_sigma ** 2 * d + self.params.odom_floor
        var_yaw = o.yaw_rw_sigma ** 2 * d + self.params.odom_floor
        return np.diag([1.0 / var_xy, 1.0 / var_xy, 1.0 / var_yaw])

    def on_scan(self, scan: LaserScan) -> None:
        if self.suite.lidar is None:
            return
        self.predict_to(scan.stamp)
        p_odom = self.ekf.pose2d
        guess = se2.compose(self.corr, p_odom)
        if len(self.graph) == 0:
            self._add_node(scan, guess, p_odom)
            return
        if self.ref is not None:
            matched, frac = track_icp(scan.points(), self.ref, guess)
            if frac >= self.params.min_track_score:
                self.corr = se2.compose(matched, se2.inverse(p_odom))
        pose = se2.compose(self.corr, p_odom)
        last = self.graph.nodes[-1].pose
        if (math.hypot(pose[0] - last[0], pose[1] - last[1]) >= self.params.node_distance
                or abs(se2.wrap(pose[2] - last[2])) >= self.params.node_angle):
            self._add_node(scan, pose, p_odom)

    def _add_node(self, scan: LaserScan, pose: np.ndarray, p_odom: np.ndarray) -> None:
        node = self.graph.add_node(pose, scan.stamp, scan)
        self.node_odom.append(p_odom.copy())
        if node.id > 0:
            z = se2.between(self.node_odom[-2], p_odom)
            d = math.hypot(z[0], z[1])
            self.graph.add_odom_edge(node.id - 1, node.id, z, self._odom_information(d, z[2]))
        integrate_scan(self.grid, scan, pose)
        self._refresh_reference()
        self.nodes_since_opt += 1
        if self.suite.loop_closure:
            det = detect_loop(self.graph, node.id, self.loop_params)
            if det.proximity:
                self.proximity_events += 1
            info = np.diag([1.0 / s ** 2 for s in self.params.loop_sigma])
            for cand in det.candidates:
                self.graph.add_loop_edge(cand.match, cand.query, cand.relative_pose, info)
                self.loop_edges += 1
                self.pending_closure = True
        if self.pending_closure and self.nodes_since_opt >= self.params.optimize_every:
            self.optimize()

    def optimize(self) -> None:
        if not self.graph.loop_edges:
            self.pending_closure = False
            return
        try:
            res = optimize_graph(self.graph)
        except SingularGraphError:
            return
        self.graph.set_poses(res.poses)
        self.optimizations += 1
        self.pending_closure = False
        self.nodes_since_opt = 0
        self.rebuild_map()
        # Re-anchor the correction on the newest optimised node.
        self.corr = se2.compose(self.graph.nodes[-1].pose, se2.inverse(self.node_odom[-1]))

    def _refresh_reference(self) -> None:
        """Tracking reference: endpoints of the newest keyframes in the map frame."""
        recent = self.graph.nodes[-self.params.track_keyframes:]
        pts = [se2.transform_points(n.pose, n.scan.points()) for n in recent]
        self.ref = reference_cloud(np.concatenate(pts)) if pts else None

    def rebuild_map(self) -> None:
        g = self.grid.empty_like()
        for n in self.graph.nodes:
            integrate_scan(g, n.scan, n.pose)
        self.grid = g
        self._refresh_reference()

    def finish(self) -> None:
        if self.pending_closure:
            self.optimize()


# ---------------------------------------------------------------------------
# Mission simulation


@dataclass
class FlightRecord:
    t: list = field(default_factory=list)
    desired: list = field(default_factory=list)
    actual: list = field(default_factory=list)


@dataclass
class MissionResult:
    truth: VehicleState
    fusion: FusionNode
    guidance: GuidanceState
    trajectory: TrajectoryMap
    flight: FlightRecord
    bus: MessageBus
    end_time: float
    completion_time: float | None
    min_clearance: float
    contacts: int
    truth_track: list
    odom_truth: list
    max_speed_cmd: float
    max_yaw_rate_cmd: float
    max_tilt_cmd: float


class MissionSim:
    def __init__(self, world: WorldModel, suite: SensorSuite, waypoints, seed: int,
                 duration_limit: float = 480.0, hold_time: float = 2.0,
                 perception_products: bool = True, guidance_params: GuidanceParams | None = None,
                 gains: AttitudeGains = AttitudeGains()):
        self.world = world
        self.suite = suite
        self.seed = seed
        wps = [np.asarray(w, dtype=float) for w in waypoints]
        start = wps[0] if wps else np.array([0.9, 0.9, -1.2])
        self.truth = VehicleState(position=start.copy())
        if len(wps) > 1:
            d = wps[1] - wps[0]
            self.truth.attitude[2] = math.atan2(d[1], d[0])
        self.clock = VirtualClock(tick=0.001, mission_limit=duration_limit)
        self.hold_time = hold_time
        self.perception_products = perception_products
        self.gparams = guidance_params or GuidanceParams()
        self.gains = gains

        ss = np.random.SeedSequence(seed)
        r = [np.random.default_rng(s) for s in ss.spawn(5)]
        self.rng_lidar, self.rng_depth, self.rng_imu, self.rng_odom, self.rng_bias = r
        self.gyro_bias = suite.imu.draw_bias(self.rng_bias) if suite.imu else None

        self.bus = MessageBus()
        for spec in standard_topics(suite):
            self.bus.register(spec)
        self._wire()

        self.fusion = FusionNode(suite, world, self.truth)
        self.gstate = GuidanceState(waypoints=[w.copy() for w in wps],
                                    position_error_tolerance=self.gparams.tolerance)
        self.cmd = AttitudeCommand(yaw=float(self.truth.attitude[2]))
        self.actuator = self.cmd
        self.plant_tick = 0
        self.odom = init_odom(self.truth, 0.0)
        self.trajectory = TrajectoryMap()
        self.flight = FlightRecord()
        self.latest_scan: LaserScan | None = None
        self.completion_time: float | None = None
        self.min_clearance = world.clearance(self.truth.position)
        self.contacts = 0
        self.truth_track: list = []
        self.odom_truth: list = []
        self.max_speed_cmd = 0.0
        self.max_yaw_rate_cmd = 0.0
        self.max_tilt_cmd = 0.0

        self.sched = Scheduler(self.clock)
        self.sched.before_event = self._advance_plant
        if suite.imu is not None:
            self.sched.add(PeriodicTask("imu", suite.imu.rate, 0, self._imu))
        self.sched.add(PeriodicTask("odom", suite.odom.rate, 1, self._odom))
        if suite.lidar is not None:
            self.sched.add(PeriodicTask("lidar", suite.lidar.rate, 2, self._lidar))
        self.sched.add(PeriodicTask("depth", suite.depth.rate, 3, self._depth))
        self.sched.add(PeriodicTask("control", CONTROL_RATE, 9, self._control))

    def _wire(self):
        b = self.bus
        s = self.suite
        b.advertise(ODOM, "sensors")
        b.advertise(DEPTH, "sensors")
        self.sub_odom = b.subscribe(ODOM, "fusion-slam")
        self.sub_depth = b.subscribe(DEPTH, "perception")
        b.advertise(CLOUD, "perception")
        b.advertise(CONFIDENCE, "perception")
        b.advertise(EDGES, "perception")
        self.sub_cloud = b.subscribe(CLOUD, "fusion-slam")
        b.advertise(FUSED, "fusion-slam")
        self.sub_fused = b.subscribe(FUSED, "guidance")
        b.advertise(ATTITUDE, "guidance")
        self.sub_att = b.subscribe(ATTITUDE, "sim-world")
        self.sub_imu = self.sub_scan = self.sub_dscan = None
        if s.imu is not None:
            b.advertise(IMU, "sensors")
            self.sub_imu = b.subscribe(IMU, "fusion-slam")
        if s.lidar is not None:
            b.advertise(SCAN, "sensors")
            self.sub_scan = b.subscribe(SCAN, "fusion-slam")
            self.sub_scan_g = b.subscribe(SCAN, "guidance")
        else:
            b.advertise(DEPTH_SCAN, "perception")
            self.sub_dscan = b.subscribe(DEPTH_SCAN, "guidance")

    # -- plant ---------------------------------------------------------------

    def _advance_plant(self, tick: int) -> None:
        if tick <= self.plant_tick:
            return
        dt = (tick - self.plant_tick) * self.clock.tick
        self.truth = step_dynamics(self.truth, self.actuator, dt, self.world)
        if self.truth.contact:
            self.contacts += 1
        self.plant_tick = tick

    # -- sensor tasks ----------------------------------------------------------

    def _imu(self, t: float) -> None:
        imu = sample_imu(self.truth, self.suite.imu, self.rng_imu, self.gyro_bias, stamp=t)
        self.bus.publish(IMU, PayloadKind.Imu, imu, t)
        for env in self.sub_imu.drain():
            self.fusion.on_imu(env.payload)

    def _odom(self, t: float) -> None:
        if t > self.odom.stamp:
            self.odom = sample_odom(self.truth, self.odom, self.suite.odom, self.rng_odom, t)
        self.bus.publish(ODOM, PayloadKind.Odometry, self.odom, t)
        for env in self.sub_odom.drain():
            self.fusion.on_odom(env.payload)
        self.odom_truth.append((t, self.truth.position.copy(), float(self.truth.attitude[2])))

    def _lidar(self, t: float) -> None:
        scan = sample_lidar(self.world, self.truth, self.suite.lidar, self.rng_lidar, stamp=t)
        self.bus.publish(SCAN, PayloadKind.LaserScan, scan, t)
        for env in self.sub_scan.drain():
            self.fusion.on_scan(env.payload)

    def _depth(self, t: float) -> None:
        img = sample_depth(self.world, self.truth, self.suite.depth, self.rng_depth, stamp=t)
        self.bus.publish(DEPTH, PayloadKind.DepthImage, img, t)
        for env in self.sub_depth.drain():
            self._perceive(env.payload, t)
        for env in self.sub_cloud.drain():
            self.fusion.on_cloud(env.payload)

    def _perceive(self, img: DepthImage, t: float) -> None:
        fused = self.fusion.fused_at(t)
        cloud = depth_to_cloud(img, fused.position, fused.attitude)
        self.bus.publish(CLOUD, PayloadKind.PointCloud, cloud, t)
        if self.perception_products:
            conf = confidence_from_depth(img)
            self.bus.publish(CONFIDENCE, PayloadKind.ConfidenceMap, conf, t)
            edges = canny_edges(depth_to_gray(img), 20.0, 50.0)
            self.bus.publish(EDGES, PayloadKind.EdgeImage, edges, t)
        if self.suite.lidar is None:
            self.bus.publish(DEPTH_SCAN, PayloadKind.LaserScan, depth_to_scan(img), t)

    # -- control ---------------------------------------------------------------

    def _control(self, t: float) -> None:
        fused = self.fusion.fused_at(t)
        self.bus.publish(FUSED, PayloadKind.Odometry, fused, t)
        fused = self.sub_fused.latest().payload
        sub = self.sub_scan_g if self.suite.lidar is not None else self.sub_dscan
        env = sub.latest()
        if env is not None:
            self.latest_scan = env.payload

        was_done = self.gstate.done
        self.gstate, cmd = guidance_step(self.gstate, fused, self.latest_scan, t, self.gparams)
        if self.gstate.done and not was_done:
            self.completion_time = t
        self.cmd = cmd
        self.max_speed_cmd = max(self.max_speed_cmd, float(np.linalg.norm(self.gstate.velocity_ned)))
        self.max_yaw_rate_cmd = max(self.max_yaw_rate_cmd, abs(self.gstate.yaw_rate_cmd))
        self.max_tilt_cmd = max(self.max_tilt_cmd, math.hypot(cmd.roll, cmd.pitch))
        self.bus.publish(ATTITUDE, PayloadKind.AttitudeCommand, cmd, t)
        self.actuator = attitude_controller(self.sub_att.latest().payload, self.truth, self.gains)

        self.trajectory.append(t, fused.pose, self.gstate.mode, self.gstate.waypoint_index, cmd.rpy)
        self.flight.t.append(t)
        self.flight.desired.append(cmd.rpy)
        self.flight.actual.append(self.truth.attitude.copy())
        self.truth_track.append((t, *self.truth.position, self.truth.attitude[2]))
        self.min_clearance = min(self.min_clearance, self.world.clearance(self.truth.position))

    def _stop(self) -> bool:
        return self.completion_time is not None and self.clock.now >= self.completion_time + self.hold_time

    def run(self) -> MissionResult:
        limit = self.clock.limit_ticks
        if limit > 0:
            self.sched.run(limit, inclusive=False, stop=self._stop)
            self._advance_plant(self.clock.ticks)
        self.fusion.finish()
        return MissionResult(
            truth=self.truth, fusion=self.fusion, guidance=self.gstate, trajectory=self.trajectory,
            flight=self.flight, bus=self.bus, end_time=self.clock.now, completion_time=self.completion_time,
            min_clearance=self.min_clearance, contacts=self.contacts, truth_track=self.truth_track,
            odom_truth=self.odom_truth,
            max_speed_cmd=self.max_speed_cmd, max_yaw_rate_cmd=self.max_yaw_rate_cmd,
            max_tilt_cmd=self.max_tilt_cmd,
        )

