"""Ball-plate rigid-body dynamics.

Balls are point masses with a contact radius. The plate is a thin square
driven toward a commanded pose by a task-space damped servo. Contacts use an
impulse model: restitution on the normal component of the relative velocity,
Coulomb friction with a static/dynamic split on the tangential component, and
positional projection out of the plate.

All functions are vectorized over leading batch dimensions. Ball arithmetic is
strictly elementwise (no BLAS reductions) so that a batch of balls evolves
bit-for-bit identically to the same balls stepped one at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

GRAVITY = 9.81
PLATE_HALF_LENGTH = 0.12
CONTROL_DT = 1.0 / 20.0
SUBSTEPS = 12
BALL_MASS = 0.05
# Normal approach speeds below this are treated as resting contact (no bounce).
BOUNCE_THRESHOLD = 0.1

# (1 + x) exp(-x) = 0.02, the 2% settling point of a critically damped oscillator.
_CRITICAL_SETTLING_CONSTANT = 5.83392170191749


class ConfigurationError(ValueError):
    """Raised for invalid ranges, counts or gains."""


class SimulationFault(RuntimeError):
    """A non-finite value appeared in the simulated state."""

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message if index is None else f"{message} (instance {index})")
        self.index = index


@dataclass(frozen=True)
class ParamRanges:
    """Closed sampling intervals for each domain parameter."""

    radius: tuple[float, float] = (0.02, 0.04)
    mu_static: tuple[float, float] = (0.0, 0.1)
    mu_dynamic: tuple[float, float] = (0.0, 0.1)
    restitution: tuple[float, float] = (0.4, 0.7)

    def __post_init__(self):
        for name in ("radius", "mu_static", "mu_dynamic", "restitution"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi or lo < 0:
                raise ConfigurationError(f"invalid interval for {name}: [{lo}, {hi}]")

    def with_restitution(self, lo: float, hi: float) -> "ParamRanges":
        return replace(self, restitution=(float(lo), float(hi)))


TRAINING_RANGES = ParamRanges()
OOD_RANGES = TRAINING_RANGES.with_restitution(0.7, 0.8)


@dataclass
class BallParams:
    radius: np.ndarray
    mu_static: np.ndarray
    mu_dynamic: np.ndarray
    restitution: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.radius, self.mu_static, self.mu_dynamic, self.restitution], axis=-1)

    @classmethod
    def from_array(cls, arr) -> "BallParams":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[..., 0].copy(), arr[..., 1].copy(), arr[..., 2].copy(), arr[..., 3].copy())

    def __getitem__(self, idx) -> "BallParams":
        return BallParams(self.radius[idx], self.mu_static[idx], self.mu_dynamic[idx], self.restitution[idx])


@dataclass
class BallState:
    position: np.ndarray
    velocity: np.ndarray

    def copy(self) -> "BallState":
        return BallState(self.position.copy(), self.velocity.copy())

    def __getitem__(self, idx) -> "BallState":
        return BallState(self.position[idx], self.velocity[idx])


@dataclass
class PlateKinematics:
    center: np.ndarray
    orientation: np.ndarray
    linear_velocity: np.ndarray
    angular_velocity: np.ndarray
    half_length: float = PLATE_HALF_LENGTH

    @classmethod
    def at_rest(cls, center, orientation=None, half_length: float = PLATE_HALF_LENGTH):
        center = np.asarray(center, dtype=np.float64)
        if orientation is None:
            orientation = np.broadcast_to(np.eye(3), center.shape[:-1] + (3, 3)).copy()
        return cls(center.copy(), np.asarray(orientation, dtype=np.float64).copy(),
                   np.zeros_like(center), np.zeros_like(center), half_length)

    @property
    def normal(self) -> np.ndarray:
        return self.orientation[..., :, 2]

    def copy(self) -> "PlateKinematics":
        return PlateKinematics(self.center.copy(), self.orientation.copy(), self.linear_velocity.copy(),
                               self.angular_velocity.copy(), self.half_length)

    def expand_for_instances(self) -> "PlateKinematics":
        """View with a singleton axis so a (E,) plate broadcasts against (E, N) balls."""
        return PlateKinematics(self.center[..., None, :], self.orientation[..., None, :, :],
                               self.linear_velocity[..., None, :], self.angular_velocity[..., None, :],
                               self.half_length)

    def __getitem__(self, idx) -> "PlateKinematics":
        return PlateKinematics(self.center[idx], self.orientation[idx], self.linear_velocity[idx],
                               self.angular_velocity[idx], self.half_length)


@dataclass(frozen=True)
class ServoGains:
    """Per-axis task-space servo gains (translational and rotational)."""

    stiffness: float
    damping: float
    rot_stiffness: float | None = None
    rot_damping: float | None = None

    def __post_init__(self):
        for name in ("stiffness", "damping", "rot_stiffness", "rot_damping"):
            val = getattr(self, name)
            if val is not None and not (math.isfinite(val) and val > 0):
                raise ConfigurationError(f"servo gain {name} must be positive, got {val}")

    @property
    def rotational(self) -> tuple[float, float]:
        k = self.stiffness if self.rot_stiffness is None else self.rot_stiffness
        d = self.damping if self.rot_damping is None else self.rot_damping
        return k, d

    @classmethod
    def critically_damped(cls, settling_time: float = 0.15) -> "ServoGains":
        omega = _CRITICAL_SETTLING_CONSTANT / settling_time
        return cls(stiffness=omega * omega, damping=2.0 * omega)


DEFAULT_GAINS = ServoGains.critically_damped(0.15)


# -- small elementwise vector helpers (bit-stable under batching) -----------

def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _cross(a, b):
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    z = np.zeros(w.shape[:-1])
    return np.stack([np.stack([z, -w[..., 2], w[..., 1]], -1),
                     np.stack([w[..., 2], z, -w[..., 0]], -1),
                     np.stack([-w[..., 1], w[..., 0], z], -1)], -2)


def exp_so3(rotvec) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.sqrt(_dot(rotvec, rotvec))
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = skew(rotvec)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def log_so3(R) -> np.ndarray:
    """Rotation vector of a rotation matrix; handles angles near 0 and pi."""
    R = np.asarray(R, dtype=np.float64)
    cos = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    vee = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    sin = np.sqrt(_dot(vee, vee)) / 2.0
    theta = np.arctan2(sin, cos)
    small = theta < 1e-6
    near_pi = theta > math.pi - 1e-4
    scale = np.where(small, 0.5 + theta**2 / 12.0, theta / (2.0 * np.where(small | near_pi, 1.0, sin)))
    out = scale[..., None] * vee
    if np.any(near_pi):
        # R = 2 a a^T - I at theta = pi; pick the best-conditioned column.
        B = (R + np.swapaxes(R, -1, -2)) / 2.0
        diag = np.diagonal(B, axis1=-2, axis2=-1)
        sq = np.clip((diag + 1.0) / 2.0, 0.0, None)
        k = np.argmax(sq, axis=-1)
        col = np.take_along_axis(B, k[..., None, None].repeat(3, -1), axis=-1)[..., 0]
        col = col + (np.arange(3) == k[..., None]) * 1.0
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        sign = np.where(_dot(axis, vee) < 0, -1.0, 1.0)
        out = np.where(near_pi[..., None], (theta * sign)[..., None] * axis, out)
    return out


def rodrigues_rotation(alpha, beta) -> np.ndarray:
    """Rotation by ``beta`` about the horizontal axis (cos alpha, sin alpha, 0)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    w = np.stack([np.cos(alpha), np.sin(alpha), np.zeros_like(alpha)], -1)
    W = skew(w)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye + np.sin(beta)[..., None, None] * W + (1.0 - np.cos(beta))[..., None, None] * (W @ W)


def rot_z(yaw) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    c, s = np.cos(yaw), np.sin(yaw)
    z, o = np.zeros_like(yaw), np.ones_like(yaw)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def sample_domain_params(rng: np.random.Generator, ranges: ParamRanges = TRAINING_RANGES,
                         size=()) -> BallParams:
    """Draw each field independently and uniformly from its interval."""
    if not isinstance(ranges, ParamRanges):
        raise ConfigurationError("ranges must be a ParamRanges")
    fields = []
    for name in ("radius", "mu_static", "mu_dynamic", "restitution"):
        lo, hi = getattr(ranges, name)
        fields.append(rng.uniform(lo, hi, size=size) if hi > lo else np.full(size, lo, dtype=np.float64))
    return BallParams(*(np.asarray(f, dtype=np.float64) for f in fields))


def plate_servo_step(plate: PlateKinematics, target_position, target_orientation,
                     gains: ServoGains = DEFAULT_GAINS, dt: float = CONTROL_DT / SUBSTEPS) -> PlateKinematics:
    """One semi-implicit Euler step of the damped second-order pose servo."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    target_position = np.asarray(target_position, dtype=np.float64)
    target_orientation = np.asarray(target_orientation, dtype=np.float64)
    if not (np.all(np.isfinite(target_position)) and np.all(np.isfinite(target_orientation))):
        raise SimulationFault("non-finite servo target")
    acc = gains.stiffness * (target_position - plate.center) - gains.damping * plate.linear_velocity
    vel = plate.linear_velocity + dt * acc
    center = plate.center + dt * vel

    k_rot, d_rot = gains.rotational
    err = log_so3(target_orientation @ np.swapaxes(plate.orientation, -1, -2))
    ang_acc = k_rot * err - d_rot * plate.angular_velocity
    omega = plate.angular_velocity + dt * ang_acc
    orientation = exp_so3(omega * dt) @ plate.orientation
    return PlateKinematics(center, orientation, vel, omega, plate.half_length)


def signed_distance(position, plate: PlateKinematics) -> np.ndarray:
    """Distance of the ball center above the plate plane, along the plate normal."""
    return _dot(position - plate.center, plate.normal)


def contact_mask(ball: BallState, plate: PlateKinematics, params: BallParams,
                 previous_position=None) -> np.ndarray:
    """Balls touching the plate's upper face within the square bounds.

    A ball counts as touching when its center is within one radius of the
    plane and it was on the upper side of the plane (at ``previous_position``
    if given, else now), so fast balls cannot tunnel through.
    """
    rel = ball.position - plate.center
    R = plate.orientation
    sd = _dot(rel, R[..., :, 2])
    t1 = _dot(rel, R[..., :, 0])
    t2 = _dot(rel, R[..., :, 1])
    ref = sd if previous_position is None else _dot(previous_position - plate.center, R[..., :, 2])
    L = plate.half_length
    return (np.abs(t1) <= L) & (np.abs(t2) <= L) & (sd <= params.radius) & (ref >= 0.0)


def resolve_impact(ball: BallState, plate: PlateKinematics, params: BallParams,
                   previous_position=None, bounce_threshold: float = BOUNCE_THRESHOLD) -> BallState:
    """Apply a restitution + Coulomb friction impulse to touching, approaching balls.

    Separating or non-touching balls are returned unchanged.
    """
    n = plate.normal
    touching = contact_mask(ball, plate, params, previous_position)
    r = params.radius
    p, v = ball.position, ball.velocity
    sd = _dot(p - plate.center, n)
    contact_point = p - r[..., None] * n
    surface_vel = plate.linear_velocity + _cross(plate.angular_velocity, contact_point - plate.center)
    vrel = v - surface_vel
    vn = _dot(vrel, n)
    hit = touching & (vn < 0.0)

    e = np.where(-vn < bounce_threshold, 0.0, params.restitution)
    jn = -(1.0 + e) * vn
    vt = vrel - vn[..., None] * n
    vt_norm = np.sqrt(_dot(vt, vt))
    stick = vt_norm <= params.mu_static * jn
    safe = np.where(vt_norm > 0.0, vt_norm, 1.0)
    slide = np.maximum(0.0, 1.0 - params.mu_dynamic * jn / safe)
    scale = np.where(stick, 0.0, slide)

    v_new = surface_vel + (-e * vn)[..., None] * n + scale[..., None] * vt
    p_new = p + (r - sd)[..., None] * n
    hit3 = hit[..., None]
    return BallState(np.where(hit3, p_new, p), np.where(hit3, v_new, v))


def advance_balls(ball: BallState, params: BallParams, plate: PlateKinematics, dt: float,
                  bounce_threshold: float = BOUNCE_THRESHOLD) -> BallState:
    """Gravity (semi-implicit Euler) followed by contact resolution against ``plate``."""
    vel = ball.velocity.copy()
    vel[..., 2] -= GRAVITY * dt
    pos = ball.position + dt * vel
    return resolve_impact(BallState(pos, vel), plate, params, previous_position=ball.position,
                          bounce_threshold=bounce_threshold)


def _check_finite(ball: BallState, plate: PlateKinematics):
    if not (np.all(np.isfinite(plate.center)) and np.all(np.isfinite(plate.orientation))):
        bad = np.argwhere(~np.isfinite(plate.center).all(-1))
        raise SimulationFault("non-finite plate state", tuple(int(i) for i in bad[0]) if len(bad) else None)
    ok = np.isfinite(ball.position).all(-1) & np.isfinite(ball.velocity).all(-1)
    if not np.all(ok):
        raise SimulationFault("non-finite ball state", tuple(int(i) for i in np.argwhere(~ok)[0]))


@dataclass
class PlateTrajectory:
    """Plate states recorded after every servo substep, for exact ball replay."""

    dt: float
    states: list = field(default_factory=list)


def step_world(ball: BallState, params: BallParams, plate: PlateKinematics, target_position,
               target_orientation, gains: ServoGains = DEFAULT_GAINS, dt: float = CONTROL_DT,
               substeps: int = SUBSTEPS, frozen=None, record: bool = False,
               bounce_threshold: float = BOUNCE_THRESHOLD):
    """Advance plate and balls over one control period.

    ``ball``/``params`` may carry one more leading axis than ``plate``
    (instances sharing one plate). ``frozen`` marks balls that must not move.
    Returns ``(ball, plate, trajectory_or_None)``.
    """
    h = dt / substeps
    extra = ball.position.ndim - plate.center.ndim
    if extra not in (0, 1):
        raise ValueError("ball batch must match the plate batch or add one instance axis")
    traj = PlateTrajectory(h) if record else None
    for _ in range(substeps):
        plate = plate_servo_step(plate, target_position, target_orientation, gains, h)
        view = plate.expand_for_instances() if extra else plate
        nxt = advance_balls(ball, params, view, h, bounce_threshold)
        if frozen is not None:
            f3 = np.asarray(frozen)[..., None]
            nxt = BallState(np.where(f3, ball.position, nxt.position), np.where(f3, ball.velocity, nxt.velocity))
        _check_finite(nxt, plate)
        ball = nxt
        if record:
            traj.states.append(plate)
    return ball, plate, traj


def replay_balls(ball: BallState, params: BallParams, trajectory: PlateTrajectory,
                 bounce_threshold: float = BOUNCE_THRESHOLD, select=None) -> BallState:
    """Re-simulate balls alone against a recorded plate trajectory.

    ``select`` indexes the recorded plate batch (e.g. one environment) so a
    single ball can be replayed against its own plate.
    """
    for plate in trajectory.states:
        if select is not None:
            plate = plate[select]
        ball = advance_balls(ball, params, plate, trajectory.dt, bounce_threshold)
    return ball
