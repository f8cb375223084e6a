"""Simulated sensor heads: LiDAR, depth camera, IMU and visual odometry.

All samplers are pure functions of ``(world, truth, spec, rng)``.  Each
sensor head owns its own ``numpy.random.Generator`` so streams stay
reproducible regardless of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .world import GRAVITY, VehicleState, WorldModel, raycast_many, wrap


# ---------------------------------------------------------------------------
# Specs


@dataclass(frozen=True)
class LidarSpec:
    rate: float = 6.4
    beams: int = 360
    max_range: float = 12.0
    min_range: float = 0.15
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.beams < 8:
            raise ValueError("a LiDAR needs at least 8 beams")
        if not self.rate > 0:
            raise ValueError("rate must be > 0")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.beams) * (2.0 * math.pi / self.beams)


@dataclass(frozen=True)
class DepthCameraSpec:
    min_range: float = 0.3
    max_range: float = 10.0
    h_fov: float = math.radians(110.0)
    width: int = 64
    height: int = 36
    rate: float = 6.18
    # sigma(depth) = depth_noise * depth
    depth_noise: float = 0.01
    # Metric scale of the returned depth; monocular proxies run with != 1.
    depth_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")
        if not self.rate > 0:
            raise ValueError("rate must be > 0")

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(self.h_fov / 2.0)

    @property
    def center(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def pixel_rays(self) -> np.ndarray:
        """Un-normalised camera-frame rays ``(1, right, down)`` per pixel, shape (H, W, 3)."""
        f = self.focal
        cx, cy = self.center
        u = (np.arange(self.width) + 0.5 - cx) / f
        v = (np.arange(self.height) + 0.5 - cy) / f
        uu, vv = np.meshgrid(u, v)
        return np.stack([np.ones_like(uu), uu, vv], axis=-1)


@dataclass(frozen=True)
class ImuSpec:
    rate: float = 300.31
    gyro_noise_sigma: float = 0.002
    accel_noise_sigma: float = 0.02
    gyro_bias_sigma: float = 2e-4
    orientation_noise_sigma: float = 0.002

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be > 0")
        if min(self.gyro_noise_sigma, self.accel_noise_sigma, self.gyro_bias_sigma,
               self.orientation_noise_sigma) < 0:
            raise ValueError("noise sigmas must be >= 0")

    def draw_bias(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, 1.0, 3) * self.gyro_bias_sigma


@dataclass(frozen=True)
class OdomDrift:
    """Per-metre drift of the visual-odometry proxy."""

    rate: float = 7.59
    scale: float = 1.0
    trans_sigma: float = 0.01      # m / sqrt(m)
    yaw_bias_per_m: float = 0.0    # rad / m
    yaw_rw_sigma: float = 0.01     # rad / sqrt(m)

    @classmethod
    def zero(cls, rate: float = 7.59) -> "OdomDrift":
        return cls(rate=rate, scale=1.0, trans_sigma=0.0, yaw_bias_per_m=0.0, yaw_rw_sigma=0.0)


# ---------------------------------------------------------------------------
# Measurements


@dataclass
class LaserScan:
    stamp: float
    angles: np.ndarray          # relative to vehicle heading, rad
    ranges: np.ndarray          # metres, inf where invalid
    max_range: float
    min_range: float = 0.0

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.ranges)

    def points(self) -> np.ndarray:
        """Valid beam endpoints in the vehicle's yaw frame, shape (n, 2)."""
        m = self.valid
        r = self.ranges[m]
        a = self.angles[m]
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


@dataclass
class DepthImage:
    stamp: float
    depth: np.ndarray           # float32 metres, NaN where invalid
    incidence: np.ndarray       # float32 radians, NaN where invalid
    spec: DepthCameraSpec

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)


@dataclass
class ImuSample:
    stamp: float
    gyro: np.ndarray
    accel: np.ndarray
    orientation: np.ndarray     # quaternion (w, x, y, z)


@dataclass
class OdomSample:
    stamp: float
    pose: np.ndarray            # (x, y, yaw) in the odometry frame
    z: float
    pose_covariance: np.ndarray
    # Drift-model state carried between samples.
    truth_ref: np.ndarray = field(default_factory=lambda: np.zeros(4))
    drift_yaw: float = 0.0
    distance: float = 0.0


# ---------------------------------------------------------------------------
# Rotation helpers


def rotation_matrix(att) -> np.ndarray:
    """Body-to-world rotation for ZYX (yaw, pitch, roll) Euler angles."""
    phi, theta, psi = att
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(psi), math.sin(psi)
    return np.array([
        [ct * cp, sf * st * cp - cf * sp, cf * st * cp + sf * sp],
        [ct * sp, sf * st * sp + cf * cp, cf * st * sp - sf * cp],
        [-st, sf * ct, cf * ct],
    ])


def euler_to_quaternion(att) -> np.ndarray:
    phi, theta, psi = (0.5 * a for a in att)
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(psi), math.sin(psi)
    return np.array([
        cf * ct * cp + sf * st * sp,
        sf * ct * cp - cf * st * sp,
        cf * st * cp + sf * ct * sp,
        cf * ct * sp - sf * st * cp,
    ])


# ---------------------------------------------------------------------------
# Samplers


def sample_lidar(world: WorldModel, truth: VehicleState, spec: LidarSpec,
                 rng: np.random.Generator, stamp: float = 0.0) -> LaserScan:
    """Level 2-D scan around the vehicle heading.

    The scanner is treated as yaw-only stabilised: beams stay in the
    horizontal plane through the vehicle position.
    """
    rel = spec.angles
    abs_a = rel + truth.attitude[2]
    dirs = np.stack([np.cos(abs_a), np.sin(abs_a), np.zeros_like(abs_a)], axis=1)
    dist, _ = raycast_many(world, truth.position, dirs, spec.max_range)
    if spec.noise_sigma > 0:
        dist = dist + rng.normal(0.0, spec.noise_sigma, dist.shape)
    ok = np.isfinite(dist) & (dist >= spec.min_range) & (dist <= spec.max_range)
    ranges = np.where(ok, dist, np.inf)
    return LaserScan(stamp, rel.copy(), ranges, spec.max_range, spec.min_range)


def sample_depth(world: WorldModel, truth: VehicleState, spec: DepthCameraSpec,
                 rng: np.random.Generator, stamp: float = 0.0) -> DepthImage:
    """Forward-looking depth image (z-depth along the camera axis)."""
    rays = spec.pixel_rays().reshape(-1, 3)
    norms = np.linalg.norm(rays, axis=1)
    R = rotation_matrix(truth.attitude)
    dirs = (rays / norms[:, None]) @ R.T
    dist, normal = raycast_many(world, truth.position, dirs, spec.max_range * 2.0)
    depth = dist / norms
    cos_inc = np.abs(np.einsum("ij,ij->i", normal, dirs))
    incidence = np.arccos(np.clip(cos_inc, 0.0, 1.0))
    depth = depth * spec.depth_scale
    if spec.depth_noise > 0:
        finite = np.isfinite(depth)
        noise = rng.normal(0.0, 1.0, depth.shape)
        depth = np.where(finite, depth + noise * spec.depth_noise * np.where(finite, depth, 0.0), depth)
    d32 = depth.astype(np.float32)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(d32) & (d32 >= spec.min_range) & (d32 <= spec.max_range)
    d32 = np.where(ok, d32, np.float32(np.nan)).astype(np.float32)
    inc32 = np.where(ok, incidence, np.nan).astype(np.float32)
    shape = (spec.height, spec.width)
    return DepthImage(stamp, d32.reshape(shape), inc32.reshape(shape), spec)


_GRAVITY_NED = np.array([0.0, 0.0, GRAVITY])


def sample_imu(truth: VehicleState, spec: ImuSpec, rng: np.random.Generator,
               bias: np.ndarray | None = None, stamp: float = 0.0) -> ImuSample:
    """Gyro, specific force and orientation in the FRD body frame.

    At rest the accelerometer reads the reaction to gravity, ``(0, 0, -g)``.
    """
    R = rotation_matrix(truth.attitude)
    gyro = truth.angular_rate.copy()
    if bias is not None:
        gyro = gyro + bias
    accel = R.T @ (truth.acceleration - _GRAVITY_NED)
    att = truth.attitude
    if spec.gyro_noise_sigma or spec.accel_noise_sigma or spec.orientation_noise_sigma:
        n = rng.standard_normal(9)
        gyro = gyro + n[:3] * spec.gyro_noise_sigma
        accel = accel + n[3:6] * spec.accel_noise_sigma
        att = att + n[6:] * spec.orientation_noise_sigma
    return ImuSample(stamp, gyro, accel, euler_to_quaternion(att))


def init_odom(truth: VehicleState, stamp: float = 0.0) -> OdomSample:
    """Odometry frame anchored on the true start pose."""
    p = truth.position
    yaw = float(truth.attitude[2])
    return OdomSample(
        stamp=stamp,
        pose=np.array([p[0], p[1], yaw]),
        z=float(p[2]),
        pose_covariance=np.zeros((3, 3)),
        truth_ref=np.array([p[0], p[1], p[2], yaw]),
        drift_yaw=0.0,
        distance=0.0,
    )


def _sinc(x: float) -> float:
    return 1.0 if abs(x) < 1e-12 else math.sin(x) / x


def sample_odom(truth: VehicleState, prev: OdomSample, drift: OdomDrift,
                rng: np.random.Generator, stamp: float) -> OdomSample:
    """Visual-odometry proxy: true increment corrupted by per-metre drift.

    The heading error grows linearly along each increment
    (``yaw_bias_per_m``) plus a random walk, and the reported displacement
    follows the corresponding arc, so a constant drift rate integrates
    exactly regardless of the sample rate.
    """
    if not stamp > prev.stamp:
        raise ValueError("odometry samples must advance in time")
    ref = prev.truth_ref
    p = truth.position
    yaw = float(truth.attitude[2])
    dp = np.array([p[0] - ref[0], p[1] - ref[1]])
    dz = float(p[2] - ref[2])
    d = float(math.hypot(dp[0], dp[1]))

    dd = drift.yaw_bias_per_m * d
    if drift.yaw_rw_sigma > 0 and d > 0:
        dd += rng.normal() * drift.yaw_rw_sigma * math.sqrt(d)
    mid = prev.drift_yaw + 0.5 * dd
    c, s = math.cos(mid), math.sin(mid)
    k = drift.scale * _sinc(0.5 * dd)
    step = k * np.array([c * dp[0] - s * dp[1], s * dp[0] + c * dp[1]])
    if drift.trans_sigma > 0 and d > 0:
        step = step + rng.normal(0.0, 1.0, 2) * drift.trans_sigma * math.sqrt(d)

    drift_yaw = prev.drift_yaw + dd
    pose = np.array([
        prev.pose[0] + step[0],
        prev.pose[1] + step[1],
        wrap(yaw + drift_yaw),
    ])
    cov = prev.pose_covariance.copy()
    if d > 0:
        cov = cov + np.diag([drift.trans_sigma ** 2 * d, drift.trans_sigma ** 2 * d,
                             drift.yaw_rw_sigma ** 2 * d])
    return OdomSample(
        stamp=stamp,
        pose=pose,
        z=prev.z + drift.scale * dz,
        pose_covariance=cov,
        truth_ref=np.array([p[0], p[1], p[2], yaw]),
        drift_yaw=drift_yaw,
        distance=prev.distance + d,
    )
