"""Static indoor environment, ground-truth vehicle kinematics and virtual time.

World frame is NED with the origin on the floor at the south-west corner:
x points north, y east, z down.  The room occupies
``[0, X] x [0, Y] x [-Z, 0]`` so a vehicle hovering 1.2 m above the floor
sits at ``z = -1.2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

GRAVITY = 9.80665

ATTITUDE_TAU = 0.15
VELOCITY_TAU = 0.4


class WorldError(ValueError):
    """Base class for world-description problems."""


class WorldParseError(WorldError):
    pass


class WorldValidationError(WorldError):
    pass


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(3))

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, p, eps: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo - eps) and np.all(p <= self.hi + eps))

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def spans_z(self, z: float) -> bool:
        return self.lo[2] <= z <= self.hi[2]


@dataclass(frozen=True)
class WorldModel:
    bounds: Box
    obstacles: tuple[Box, ...] = ()
    cell_size: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        validate_world(self)
        # Stacked obstacle corners for the vectorised ray caster.
        if self.obstacles:
            lo = np.stack([b.lo for b in self.obstacles])
            hi = np.stack([b.hi for b in self.obstacles])
        else:
            lo = np.zeros((0, 3))
            hi = np.zeros((0, 3))
        object.__setattr__(self, "_obs_lo", lo)
        object.__setattr__(self, "_obs_hi", hi)

    def to_document(self) -> dict:
        ext = self.bounds.extent
        return {
            "schema": 1,
            "bounds": [float(v) for v in ext],
            "cell_size": self.cell_size,
            "obstacles": [
                {"min": [float(v) for v in b.lo], "max": [float(v) for v in b.hi]}
                for b in self.obstacles
            ],
        }

    def is_free(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        if not self.bounds.contains(p, eps=-margin):
            return False
        return not any(b.contains(p, eps=margin) for b in self.obstacles)

    def clearance(self, p) -> float:
        """Euclidean distance from ``p`` to the nearest obstacle or wall."""
        p = np.asarray(p, dtype=float)
        d = float(np.min(np.minimum(p - self.bounds.lo, self.bounds.hi - p)))
        for b in self.obstacles:
            q = np.clip(p, b.lo, b.hi)
            d = min(d, float(np.linalg.norm(p - q)))
        return d


def validate_world(world: WorldModel) -> None:
    ext = world.bounds.extent
    if not np.all(np.isfinite(ext)) or np.any(ext <= 0):
        raise WorldValidationError(f"bounds extents must be strictly positive, got {ext.tolist()}")
    if not (world.cell_size > 0 and math.isfinite(world.cell_size)):
        raise WorldValidationError(f"cell_size must be > 0, got {world.cell_size}")
    for i, b in enumerate(world.obstacles):
        if np.any(b.extent <= 0):
            raise WorldValidationError(f"obstacle {i} has non-positive extent")
        if not world.bounds.contains_box(b):
            raise WorldValidationError(f"obstacle {i} is not contained in bounds")


def make_bounds(extent) -> Box:
    x, y, z = (float(v) for v in extent)
    return Box([0.0, 0.0, -z], [x, y, 0.0])


def world_from_document(doc: dict) -> WorldModel:
    if not isinstance(doc, dict):
        raise WorldParseError("world document must be an object")
    schema = doc.get("schema", 1)
    if schema != 1:
        raise WorldParseError(f"unsupported world schema {schema!r}")
    try:
        extent = [float(v) for v in doc.get("bounds", [7.0, 7.0, 5.0])]
        if len(extent) != 3:
            raise WorldParseError("bounds must have three entries")
        cell = float(doc.get("cell_size", 0.05))
        obstacles = []
        for o in doc.get("obstacles", []):
            lo = [float(v) for v in o["min"]]
            hi = [float(v) for v in o["max"]]
            if len(lo) != 3 or len(hi) != 3:
                raise WorldParseError("obstacle corners must have three entries")
            obstacles.append(Box(lo, hi))
    except (KeyError, TypeError) as exc:
        raise WorldParseError(f"malformed world document: {exc}") from exc
    return WorldModel(make_bounds(extent), tuple(obstacles), cell)


def load_world(document: str) -> WorldModel:
    """Parse and validate a JSON world description."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise WorldParseError(f"invalid JSON: {exc}") from exc
    return world_from_document(doc)


FLIGHT_ALTITUDE = 1.2


def default_world() -> WorldModel:
    """7 x 7 x 5 m hall with four free-standing 3 m tall boxes.

    The boxes leave a 1.8 m perimeter corridor and a 1.4 m cross-shaped
    corridor through the middle.
    """
    boxes = []
    for x0 in (1.8, 4.2):
        for y0 in (1.8, 4.2):
            boxes.append(Box([x0, y0, -3.0], [x0 + 1.0, y0 + 1.0, 0.0]))
    return WorldModel(make_bounds([7.0, 7.0, 5.0]), tuple(boxes), 0.05)


# ---------------------------------------------------------------------------
# Ray casting


def _slab(lo, hi, o, d):
    """Entry/exit parameters of rays ``o + t d`` against boxes.

    ``lo``/``hi`` broadcast against ``o``/``d`` along the last axis.  Returns
    ``(t_near, t_far, near_axis, far_axis)``.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # Axis-parallel rays: slab is either everything or nothing.
    par = d == 0.0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    near_axis = np.argmax(tmin, axis=-1)
    far_axis = np.argmin(tmax, axis=-1)
    t_near = np.take_along_axis(tmin, near_axis[..., None], axis=-1)[..., 0]
    t_far = np.take_along_axis(tmax, far_axis[..., None], axis=-1)[..., 0]
    return t_near, t_far, near_axis, far_axis


def raycast_many(world: WorldModel, origins, directions, max_range: float):
    """Vectorised ray cast.

    Returns ``(dist, normal)`` where ``dist`` is ``inf`` for rays with no
    surface within ``max_range`` and ``normal`` is the unit surface normal
    facing the ray origin (zeros on a miss).
    """
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    o = np.broadcast_to(np.asarray(origins, dtype=float), d.shape)
    n = d.shape[0]

    # Walls: the ray leaves the room through its exit face.
    _, t_exit, _, exit_axis = _slab(world.bounds.lo, world.bounds.hi, o, d)
    best = t_exit
    axis = exit_axis
    sign = -np.sign(d[np.arange(n), exit_axis])

    if world.obstacles:
        lo = world._obs_lo[None, :, :]
        hi = world._obs_hi[None, :, :]
        tn, tf, na, _ = _slab(lo, hi, o[:, None, :], d[:, None, :])
        hit = (tn <= tf) & (tf >= 0.0)
        tn = np.where(hit, np.maximum(tn, 0.0), np.inf)
        k = np.argmin(tn, axis=1)
        t_obs = tn[np.arange(n), k]
        a_obs = na[np.arange(n), k]
        closer = t_obs < best
        best = np.where(closer, t_obs, best)
        axis = np.where(closer, a_obs, axis)
        sign = np.where(closer, -np.sign(d[np.arange(n), a_obs]), sign)

    normal = np.zeros((n, 3))
    normal[np.arange(n), axis] = sign
    miss = ~(best <= max_range)
    dist = np.where(miss, np.inf, best)
    normal[miss] = 0.0
    return dist, normal


def raycast(world: WorldModel, origin, direction, max_range: float) -> float | None:
    """Distance to the first surface along ``direction`` or ``None`` on a miss."""
    dist, _ = raycast_many(world, np.asarray(origin, float), np.asarray(direction, float)[None, :], max_range)
    t = float(dist[0])
    return None if math.isinf(t) else t


# ---------------------------------------------------------------------------
# Vehicle state and plant


def wrap_angle(a):
    """Wrap to ``[-pi, pi)``."""
    return (np.asarray(a) + math.pi) % (2.0 * math.pi) - math.pi


def wrap(a: float) -> float:
    # Values already in range pass through untouched so equilibria stay exact.
    if -math.pi <= a < math.pi:
        return a
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass
class VehicleState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_rate: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mass: float = 1.5
    contact: bool = False
    # Velocity derivative over the last step, used by the accelerometer model.
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "VehicleState":
        return replace(
            self,
            position=self.position.copy(),
            velocity=self.velocity.copy(),
            attitude=self.attitude.copy(),
            angular_rate=self.angular_rate.copy(),
            acceleration=self.acceleration.copy(),
        )

    @property
    def yaw(self) -> float:
        return float(self.attitude[2])


@dataclass(frozen=True)
class AttitudeCommand:
    """Desired attitude plus the horizontal velocity it is meant to realise."""

    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    climb_rate: float = 0.0
    velocity_ne: tuple[float, float] = (0.0, 0.0)

    @property
    def rpy(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw])

    @property
    def velocity_ned(self) -> np.ndarray:
        return np.array([self.velocity_ne[0], self.velocity_ne[1], -self.climb_rate])


def euler_rates_to_body(att, euler_rates) -> np.ndarray:
    phi, theta, _ = att
    dphi, dtheta, dpsi = euler_rates
    sp, cp = math.sin(phi), math.cos(phi)
    st, ct = math.sin(theta), math.cos(theta)
    return np.array([
        dphi - dpsi * st,
        dtheta * cp + dpsi * ct * sp,
        -dtheta * sp + dpsi * ct * cp,
    ])


def body_to_euler_rates(att, omega) -> np.ndarray:
    phi, theta, _ = att
    p, q, r = omega
    sp, cp = math.sin(phi), math.cos(phi)
    ct, tt = math.cos(theta), math.tan(theta)
    return np.array([
        p + (q * sp + r * cp) * tt,
        q * cp - r * sp,
        (q * sp + r * cp) / ct,
    ])


_TILT_CAP = math.pi / 2 - 1e-3


def _segment_hit(world: WorldModel, p0: np.ndarray, p1: np.ndarray) -> float:
    """Fraction along p0->p1 where the segment first touches a surface (1.0 if clear).

    Scalar slab test; the plant calls this for every step so it avoids
    numpy overhead on what are only a handful of boxes.
    """
    a = p0.tolist()
    d = (p1 - p0).tolist()
    if d[0] == 0.0 and d[1] == 0.0 and d[2] == 0.0:
        return 1.0
    best = 1.0
    # Leaving the room through a wall.
    blo, bhi = world.bounds.lo.tolist(), world.bounds.hi.tolist()
    for k in range(3):
        if d[k] > 0.0:
            t = (bhi[k] - a[k]) / d[k]
        elif d[k] < 0.0:
            t = (blo[k] - a[k]) / d[k]
        else:
            continue
        if t < best:
            best = max(t, 0.0)
    for b in world.obstacles:
        lo, hi = b.lo.tolist(), b.hi.tolist()
        t0, t1 = 0.0, best
        for k in range(3):
            if d[k] == 0.0:
                if a[k] < lo[k] or a[k] > hi[k]:
                    t0, t1 = 1.0, 0.0
                    break
                continue
            u = (lo[k] - a[k]) / d[k]
            v = (hi[k] - a[k]) / d[k]
            if u > v:
                u, v = v, u
            t0 = max(t0, u)
            t1 = min(t1, v)
            if t0 > t1:
                break
        if t0 <= t1 and t0 < best:
            best = t0
    return best


def step_dynamics(state: VehicleState, cmd: AttitudeCommand, dt: float,
                  world: WorldModel | None = None,
                  attitude_tau: float = ATTITUDE_TAU,
                  velocity_tau: float = VELOCITY_TAU) -> VehicleState:
    """Advance the first-order-lag kinematic plant by ``dt`` seconds.

    The command is held constant over the step and the lag equations are
    integrated in closed form, so one step of ``2*dt`` equals two steps of
    ``dt`` up to rounding.  When ``world`` is given, a segment that would
    cross a surface is stopped on it and ``contact`` is set.
    """
    a_att = math.exp(-dt / attitude_tau)
    a_vel = math.exp(-dt / velocity_tau)

    att0 = state.attitude
    target = np.array([
        max(-_TILT_CAP, min(_TILT_CAP, cmd.roll)),
        max(-_TILT_CAP, min(_TILT_CAP, cmd.pitch)),
        cmd.yaw,
    ])
    err = target - att0
    err[2] = wrap(err[2])
    att1 = att0 + err * (1.0 - a_att)
    err1 = err * a_att
    att1[2] = wrap(att1[2])
    euler_rate = err1 / attitude_tau

    v0 = state.velocity
    v_cmd = cmd.velocity_ned
    dv = v0 - v_cmd
    v1 = v_cmd + dv * a_vel
    p1 = state.position + v_cmd * dt + dv * velocity_tau * (1.0 - a_vel)
    acc = (v_cmd - v1) / velocity_tau

    contact = False
    if world is not None:
        frac = _segment_hit(world, state.position, p1)
        if frac < 1.0:
            seg = p1 - state.position
            p1 = state.position + seg * frac
            # Back off by a hair so the vehicle stays outside the solid.
            p1 = p1 - seg / np.linalg.norm(seg) * 1e-9
            v1 = np.zeros(3)
            acc = np.zeros(3)
            contact = True

    return VehicleState(
        position=p1,
        velocity=v1,
        attitude=att1,
        angular_rate=euler_rates_to_body(att1, euler_rate),
        mass=state.mass,
        contact=contact,
        acceleration=acc,
    )


# ---------------------------------------------------------------------------
# Virtual time


class MissionTimeExceeded(RuntimeError):
    pass


@dataclass
class VirtualClock:
    """Integer tick counter; ``now`` is always ``ticks * tick``."""

    tick: float = 0.001
    mission_limit: float = 480.0
    ticks: int = 0

    @property
    def now(self) -> float:
        return self.ticks * self.tick

    @property
    def limit_ticks(self) -> int:
        return int(round(self.mission_limit / self.tick))

    @property
    def expired(self) -> bool:
        return self.ticks >= self.limit_ticks

    def to_ticks(self, seconds: float) -> int:
        return int(round(seconds / self.tick))

    def advance_to(self, ticks: int) -> float:
        if ticks < self.ticks:
            raise ValueError("virtual time cannot move backwards")
        if ticks > self.limit_ticks:
            raise MissionTimeExceeded(f"tick {ticks} beyond mission limit")
        self.ticks = ticks
        return self.now
