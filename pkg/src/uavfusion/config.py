"""Run configuration documents and the three sensor suites."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .sensors import DepthCameraSpec, ImuSpec, LidarSpec, OdomDrift
from .world import FLIGHT_ALTITUDE, WorldModel, WorldParseError, default_world, load_world, world_from_document

CONFIGURATIONS = ("A", "B", "C")


class ConfigError(ValueError):
    pass


# Reference figures per configuration, echoed into reports.
TABLE1_METADATA = {
    "A": {"label": "monocular", "power_w": 5.0, "cost": 800.0, "mass_kg": 1.0},
    "B": {"label": "depth+imu", "power_w": 7.0, "cost": 1300.0, "mass_kg": 1.2},
    "C": {"label": "depth+imu+lidar", "power_w": 8.0, "cost": 1500.0, "mass_kg": 1.5},
}

# Published field results, printed beside simulated values and never mixed in.
TABLE1_REFERENCE = {
    "A": {"navigation_accuracy": 0.7, "mapping_rmse": 0.22, "exploration_time": 18 * 60.0,
          "avg_power": 5.0, "total_energy": 900.0},
    "B": {"navigation_accuracy": 0.5, "mapping_rmse": 0.15, "exploration_time": 15 * 60.0,
          "avg_power": 7.0, "total_energy": 1260.0},
    "C": {"navigation_accuracy": 0.4, "mapping_rmse": 0.13, "exploration_time": 12 * 60.0,
          "avg_power": 8.0, "total_energy": 1440.0},
}

RECONSTRUCTION_REFERENCE = {0.25: 97.0, 1.0: 94.0, 3.0: 76.0, 6.0: 40.0}


@dataclass(frozen=True)
class SensorSuite:
    name: str
    odom: OdomDrift
    depth: DepthCameraSpec
    imu: ImuSpec | None = None
    lidar: LidarSpec | None = None
    loop_closure: bool = False

    def zero_noise(self) -> "SensorSuite":
        rep = dataclasses.replace
        return rep(
            self,
            odom=OdomDrift.zero(self.odom.rate),
            depth=rep(self.depth, depth_noise=0.0, depth_scale=1.0),
            imu=None if self.imu is None else rep(self.imu, gyro_noise_sigma=0.0, accel_noise_sigma=0.0,
                                                  gyro_bias_sigma=0.0, orientation_noise_sigma=0.0),
            lidar=None if self.lidar is None else rep(self.lidar, noise_sigma=0.0),
        )


def sensor_suite(configuration: str) -> SensorSuite:
    """Default sensors for configuration A, B or C.

    A is a monocular visual-odometry proxy: depth has a scale error and is
    noisier, and odometry drifts faster.  B has metric depth and an IMU-aided
    odometry.  C adds a 2-D LiDAR with scan matching and loop closure.
    """
    if configuration == "A":
        return SensorSuite(
            "A",
            odom=OdomDrift(scale=1.04, trans_sigma=0.02, yaw_rw_sigma=0.03),
            depth=DepthCameraSpec(depth_noise=0.03, depth_scale=1.04),
        )
    if configuration == "B":
        return SensorSuite(
            "B",
            odom=OdomDrift(scale=1.0, trans_sigma=0.01, yaw_rw_sigma=0.012),
            depth=DepthCameraSpec(),
            imu=ImuSpec(),
        )
    if configuration == "C":
        return SensorSuite(
            "C",
            odom=OdomDrift(scale=1.0, trans_sigma=0.01, yaw_rw_sigma=0.012),
            depth=DepthCameraSpec(),
            imu=ImuSpec(),
            lidar=LidarSpec(),
            loop_closure=True,
        )
    raise ConfigError(f"unknown sensor configuration {configuration!r}")


def default_mission(z: float = -FLIGHT_ALTITUDE) -> list[list[float]]:
    """Perimeter loop back to the start, then into the middle of the hall."""
    pts = [(0.9, 0.9), (6.1, 0.9), (6.1, 6.1), (0.9, 6.1), (0.9, 0.9), (3.5, 0.9), (3.5, 3.5)]
    return [[x, y, z] for x, y in pts]


_SUITE_FIELDS = {"odom": OdomDrift, "depth": DepthCameraSpec, "imu": ImuSpec, "lidar": LidarSpec}


@dataclass
class RunConfig:
    configuration: str = "C"
    seed: int = 0
    world: dict | None = None           # inline world document; None = default world
    world_path: str | None = None
    waypoints: list = field(default_factory=default_mission)
    duration_limit: float = 180.0
    hold_time: float = 2.0              # station keeping after the last waypoint
    zero_noise: bool = False
    sensor_overrides: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=lambda: {"perception": True, "flight_log": True})
    metadata: dict | None = None

    def __post_init__(self):
        if self.configuration not in CONFIGURATIONS:
            raise ConfigError(f"configuration must be one of {CONFIGURATIONS}, got {self.configuration!r}")
        if not self.duration_limit >= 0:
            raise ConfigError("duration_limit must be >= 0")
        for w in self.waypoints:
            if len(w) != 3:
                raise ConfigError("waypoints must be [x, y, z] triples")
        unknown = set(self.sensor_overrides) - set(_SUITE_FIELDS)
        if unknown:
            raise ConfigError(f"unknown sensor override groups: {sorted(unknown)}")
        if self.metadata is None:
            self.metadata = dict(TABLE1_METADATA[self.configuration])

    def load_world(self, base: Path | None = None) -> WorldModel:
        if self.world is not None:
            return world_from_document(self.world)
        if self.world_path is not None:
            p = Path(self.world_path)
            if base is not None and not p.is_absolute():
                p = base / p
            try:
                text = p.read_text()
            except OSError as exc:
                raise WorldParseError(f"cannot read world file {p}: {exc}") from exc
            return load_world(text)
        return default_world()

    def suite(self) -> SensorSuite:
        s = sensor_suite(self.configuration)
        for group, values in self.sensor_overrides.items():
            cur = getattr(s, group)
            if cur is None:
                raise ConfigError(f"configuration {self.configuration} has no {group} sensor")
            try:
                s = dataclasses.replace(s, **{group: dataclasses.replace(cur, **values)})
            except TypeError as exc:
                raise ConfigError(f"bad {group} override: {exc}") from exc
        return s.zero_noise() if self.zero_noise else s

    def to_document(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema"] = 1
        return d

    @classmethod
    def from_document(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be an object")
        doc = dict(doc)
        schema = doc.pop("schema", 1)
        if schema != 1:
            raise ConfigError(f"unsupported config schema {schema!r}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_document(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
