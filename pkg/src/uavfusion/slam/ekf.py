"""Pose filter over (x, y, z, roll, pitch, yaw) fed by gyro and odometry.

The process model integrates gyro rates into Euler angles and moves the
position with a body-frame velocity held constant between odometry
samples.  Measurement updates use the Joseph form so the covariance stays
symmetric positive semi-definite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..world import body_to_euler_rates, wrap

IX, IY, IZ, IROLL, IPITCH, IYAW = range(6)

# Continuous-time process noise densities per second.
DEFAULT_Q = np.diag([0.02, 0.02, 0.005, 1e-4, 1e-4, 1e-4])
# Attitude uncertainty grows much faster without a gyro.
NO_GYRO_Q = np.diag([0.02, 0.02, 0.005, 0.05, 0.05, 0.05])


class SingularInnovation(ArithmeticError):
    """Innovation covariance could not be inverted."""


@dataclass
class FusedPose:
    stamp: float
    pose: np.ndarray = field(default_factory=lambda: np.zeros(6))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    # Velocity in the yaw-aligned body frame (forward, right, down).
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "FusedPose":
        return replace(self, pose=self.pose.copy(), covariance=self.covariance.copy(),
                       velocity=self.velocity.copy())

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3]

    @property
    def attitude(self) -> np.ndarray:
        return self.pose[3:]

    @property
    def pose2d(self) -> np.ndarray:
        return np.array([self.pose[IX], self.pose[IY], self.pose[IYAW]])


def ekf_predict(state: FusedPose, gyro, dt: float, q: np.ndarray = DEFAULT_Q) -> FusedPose:
    """Propagate by ``dt`` seconds.

    ``gyro`` is a body-rate 3-vector (or an object with a ``gyro`` field,
    e.g. an IMU sample); ``None`` keeps the attitude fixed.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if gyro is not None and hasattr(gyro, "gyro"):
        gyro = gyro.gyro
    x = state.pose.copy()
    yaw = x[IYAW]
    c, s = math.cos(yaw), math.sin(yaw)
    vf, vr, vd = state.velocity
    x[IX] += (c * vf - s * vr) * dt
    x[IY] += (s * vf + c * vr) * dt
    x[IZ] += vd * dt
    if gyro is not None:
        rates = body_to_euler_rates(x[3:], gyro)
        x[3:] += rates * dt
    x[IROLL] = wrap(x[IROLL])
    x[IPITCH] = wrap(x[IPITCH])
    x[IYAW] = wrap(x[IYAW])

    # F is the identity except for the position-heading coupling, so
    # F P F^T reduces to two rank-one corrections.
    fx = (-s * vf - c * vr) * dt
    fy = (c * vf - s * vr) * dt
    P = state.covariance.copy()
    if fx or fy:
        col = P[:, IYAW].copy()
        P[IX, :] += fx * col
        P[IY, :] += fy * col
        col = P[:, IYAW].copy()
        P[:, IX] += fx * col
        P[:, IY] += fy * col
    P += q * dt
    P = 0.5 * (P + P.T)
    return FusedPose(state.stamp + dt, x, P, state.velocity.copy())


def ekf_update_pose2d(state: FusedPose, z, R: np.ndarray) -> FusedPose:
    """Measurement update on (x, y, yaw)."""
    H = np.zeros((3, 6))
    H[0, IX] = H[1, IY] = H[2, IYAW] = 1.0
    R = np.asarray(R, dtype=float)
    if not np.all(np.isfinite(R)):
        # Infinite measurement noise carries no information.
        return state.copy()
    x = state.pose
    P = state.covariance
    innov = np.array([z[0] - x[IX], z[1] - x[IY], wrap(z[2] - x[IYAW])])
    S = H @ P @ H.T + R
    S = 0.5 * (S + S.T)
    try:
        cond = np.linalg.cond(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation(str(exc)) from exc
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularInnovation(f"innovation covariance condition number {cond:.3g}")
    K = np.linalg.solve(S, H @ P).T
    xn = x + K @ innov
    for i in (IROLL, IPITCH, IYAW):
        xn[i] = wrap(xn[i])
    A = np.eye(6) - K @ H
    Pn = A @ P @ A.T + K @ R @ K.T
    Pn = 0.5 * (Pn + Pn.T)
    return FusedPose(state.stamp, xn, Pn, state.velocity.copy())


def ekf_update_odom(state: FusedPose, odom) -> FusedPose:
    """Absolute (x, y, yaw) update from an odometry sample and its covariance."""
    return ekf_update_pose2d(state, odom.pose, odom.pose_covariance)


def is_psd(P: np.ndarray, tol: float = 1e-12) -> bool:
    if not np.allclose(P, P.T, atol=1e-12, rtol=0):
        return False
    return bool(np.linalg.eigvalsh(P).min() >= -tol)
