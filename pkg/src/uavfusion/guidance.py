"""Waypoint guidance state machine, obstacle avoidance and attitude tracking."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .sensors import LaserScan
from .world import GRAVITY, AttitudeCommand, VehicleState, body_to_euler_rates, wrap


class Mode(enum.Enum):
    Stabilize = "Stabilize"
    GuidedNoGps = "GuidedNoGps"


@dataclass(frozen=True)
class GuidanceParams:
    v_max: float = 1.0
    yaw_rate_max: float = 1.0
    tolerance: float = 0.25
    proximity: float = 0.8                  # m, obstruction threshold
    cone: float = math.radians(45.0)        # half-width around heading
    sectors: int = 18
    clearance_cap: float = 1.5              # sector clearances saturate here
    kp_pos: float = 0.9                     # 1/s
    k_yaw: float = 1.5                      # 1/s
    avoid_speed: float = 0.35
    tilt_max: float = math.radians(30.0)
    velocity_tau: float = 0.4
    dt: float = 0.02                        # control period


@dataclass
class GuidanceState:
    mode: Mode = Mode.Stabilize
    drone_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity_ned: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_rate_cmd: float = 0.0
    position_error_tolerance: float = 0.25
    waypoints: list = field(default_factory=list)
    waypoint_index: int = 0
    des_yaw: float | None = None
    avoiding: bool = False
    reached: list = field(default_factory=list)

    @property
    def active_waypoint(self) -> np.ndarray | None:
        if self.waypoint_index < len(self.waypoints):
            return np.asarray(self.waypoints[self.waypoint_index], dtype=float)
        return None

    @property
    def done(self) -> bool:
        return self.waypoint_index >= len(self.waypoints)


def is_obstructed(scan: LaserScan | None, params: GuidanceParams) -> bool:
    if scan is None:
        return False
    rel = np.abs(wrap_array(scan.angles))
    close = np.isfinite(scan.ranges) & (scan.ranges < params.proximity) & (rel <= params.cone)
    return bool(close.any())


def wrap_array(a):
    return (np.asarray(a, dtype=float) + math.pi) % (2.0 * math.pi) - math.pi


def sector_clearances(scan: LaserScan, heading: float, n: int, max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """World-frame sector centres and the minimum range seen in each.

    Sectors with no beam at all get clearance 0, so unobserved directions
    are never preferred.  Beams with no return count as ``max_range``.
    """
    width = 2.0 * math.pi / n
    centres = -math.pi + (np.arange(n) + 0.5) * width
    ab = wrap_array(scan.angles + heading)
    idx = np.floor((ab + math.pi) / width).astype(int) % n
    r = np.where(np.isfinite(scan.ranges), scan.ranges, max_range)
    clear = np.full(n, np.inf)
    np.minimum.at(clear, idx, r)
    clear[~np.isfinite(clear)] = 0.0
    return centres, clear


def choose_sector(scan: LaserScan, heading: float, goal_bearing: float | None,
                  params: GuidanceParams) -> tuple[int, float]:
    """Best sector by capped clearance; ties go to the one closest to the goal."""
    centres, clear = sector_clearances(scan, heading, params.sectors, scan.max_range)
    score = np.minimum(clear, params.clearance_cap)
    ref = heading if goal_bearing is None else goal_bearing
    misalign = np.abs(wrap_array(centres - ref))
    order = np.lexsort((misalign, -score))
    k = int(order[0])
    return k, float(centres[k])


def _clip_norm(v: np.ndarray, vmax: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v if n <= vmax else v * (vmax / n)


def guidance_step(state: GuidanceState, fused, scan: LaserScan | None, t: float = 0.0,
                  params: GuidanceParams | None = None) -> tuple[GuidanceState, AttitudeCommand]:
    """One control iteration.

    ``fused`` needs ``position``, ``attitude`` and a yaw-frame ``velocity``
    (a FusedPose).  The returned command carries the desired attitude and
    the velocity it is meant to realise.
    """
    params = params or GuidanceParams()
    pos = np.asarray(fused.position, dtype=float)
    if not np.all(np.isfinite(pos)):
        raise ValueError("fused position is not finite")
    yaw = float(fused.attitude[2])
    st = replace(state, drone_position=pos.copy(), reached=list(state.reached))
    if st.des_yaw is None:
        st.des_yaw = yaw

    wp = st.active_waypoint
    if wp is not None and np.linalg.norm(wp[:2] - pos[:2]) < st.position_error_tolerance:
        st.mode = Mode.GuidedNoGps
        st.reached.append((t, st.waypoint_index))
        st.waypoint_index += 1
        wp = st.active_waypoint

    st.avoiding = False
    if wp is None:
        # Queue exhausted: hold position on the final waypoint, if any.
        yaw_rate = 0.0
        if st.waypoints:
            err = np.asarray(st.waypoints[-1], dtype=float) - pos
            v = _clip_norm(params.kp_pos * err, params.v_max)
        else:
            v = np.zeros(3)
    else:
        err = wp - pos
        goal_bearing = math.atan2(err[1], err[0])
        if is_obstructed(scan, params):
            st.avoiding = True
            _, bearing = choose_sector(scan, yaw, goal_bearing, params)
            herr = wrap(bearing - yaw)
            speed = params.avoid_speed * max(0.0, math.cos(herr))
            v = np.array([speed * math.cos(bearing), speed * math.sin(bearing), 0.0])
            yaw_rate = params.k_yaw * herr
        else:
            v_h = _clip_norm(params.kp_pos * err[:2], params.v_max)
            herr = wrap(goal_bearing - yaw) if np.linalg.norm(err[:2]) > 0.05 else 0.0
            # Slow down while the nose (and the camera) is not on the path.
            v_h = v_h * max(0.0, math.cos(herr)) ** 2
            vz = float(np.clip(params.kp_pos * err[2], -0.5, 0.5))
            v = np.array([v_h[0], v_h[1], vz])
            yaw_rate = params.k_yaw * herr
        v = _clip_norm(v, params.v_max)
    yaw_rate = float(np.clip(yaw_rate, -params.yaw_rate_max, params.yaw_rate_max))
    st.velocity_ned = v
    st.yaw_rate_cmd = yaw_rate
    st.des_yaw = wrap(st.des_yaw + yaw_rate * params.dt)

    # Tilt that produces the acceleration needed to reach v.
    c, s = math.cos(yaw), math.sin(yaw)
    vb = np.asarray(getattr(fused, "velocity", np.zeros(3)), dtype=float)
    v_now = np.array([c * vb[0] - s * vb[1], s * vb[0] + c * vb[1]])
    acc = (v[:2] - v_now) / params.velocity_tau
    a_fwd = c * acc[0] + s * acc[1]
    a_right = -s * acc[0] + c * acc[1]
    pitch = -math.atan2(a_fwd, GRAVITY)
    roll = math.atan2(a_right, GRAVITY)
    pitch, roll = limit_tilt(pitch, roll, params.tilt_max)
    cmd = AttitudeCommand(roll=roll, pitch=pitch, yaw=st.des_yaw, climb_rate=-float(v[2]),
                          velocity_ne=(float(v[0]), float(v[1])))
    return st, cmd


def limit_tilt(pitch: float, roll: float, tilt_max: float) -> tuple[float, float]:
    tilt = math.hypot(pitch, roll)
    if tilt > tilt_max:
        k = tilt_max / tilt
        return pitch * k, roll * k
    return pitch, roll


@dataclass(frozen=True)
class AttitudeGains:
    kp: float = 1.5
    kd: float = 0.02


def attitude_controller(cmd: AttitudeCommand, actual: VehicleState,
                        gains: AttitudeGains = AttitudeGains()) -> AttitudeCommand:
    """PD setpoint shaping: ``u = desired + kp * error - kd * euler_rate``.

    Against a first-order attitude lag with time constant ``tau`` this gives
    a first-order closed loop with time constant ``(tau + kd) / (1 + kp)``
    and no steady-state error.
    """
    des = cmd.rpy
    err = des - actual.attitude
    err[2] = wrap(err[2])
    rate = body_to_euler_rates(actual.attitude, actual.angular_rate)
    u = des + gains.kp * err - gains.kd * rate
    return replace(cmd, roll=float(u[0]), pitch=float(u[1]), yaw=wrap(float(u[2])))


# ---------------------------------------------------------------------------
# Trajectory map output

TRAJECTORY_COLUMNS = ["t", "x", "y", "z", "roll", "pitch", "yaw", "mode", "waypoint_index",
                      "des_roll", "des_pitch", "des_yaw"]


@dataclass
class TrajectoryMap:
    rows: list = field(default_factory=list)
    map_pgm: bytes | None = None
    metadata: dict = field(default_factory=dict)

    def append(self, t: float, pose, mode: Mode, waypoint_index: int, desired) -> None:
        if self.rows and not t > self.rows[-1][0]:
            raise ValueError("trajectory stamps must be strictly increasing")
        self.rows.append((float(t), *(float(v) for v in pose), mode.value, int(waypoint_index),
                          *(float(v) for v in desired)))

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in self.rows:
            w.writerow([f"{r[0]:.3f}"] + [f"{v:.6f}" for v in r[1:7]] + [r[7], r[8]]
                       + [f"{v:.6f}" for v in r[9:]])
        return buf.getvalue()


def read_trajectory_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for k in TRAJECTORY_COLUMNS:
            if k == "mode":
                continue
            r[k] = int(r[k]) if k == "waypoint_index" else float(r[k])
    return rows


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_trajectory_map(history: TrajectoryMap, out_dir: str | os.PathLike,
                        grid=None, metadata: dict | None = None) -> dict[str, Path]:
    """Write trajectory.csv, map.pgm and metadata.json into ``out_dir``.

    Each file is written to a temporary name and renamed into place.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trajectory": out / "trajectory.csv", "metadata": out / "metadata.json"}
    meta = dict(history.metadata)
    meta.update(metadata or {})
    meta["rows"] = len(history)
    _atomic_write(paths["trajectory"], history.to_csv().encode())
    pgm = grid.to_pgm() if grid is not None else history.map_pgm
    if pgm is not None:
        paths["map"] = out / "map.pgm"
        _atomic_write(paths["map"], pgm)
    _atomic_write(paths["metadata"], (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return paths
