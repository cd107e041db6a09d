"""The reactive catching MDP: motion frame, state/action encoding, reward,
episode initialization, success test and the perturbations used in evaluation.

States are arrays of shape ``(..., 6)`` holding ``(d, v)`` in the motion
frame. Actions are arrays of shape ``(..., 5)`` holding ``(delta, alpha, beta)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .physics import (
    GRAVITY,
    PLATE_HALF_LENGTH,
    BallState,
    ConfigurationError,
    PlateKinematics,
    exp_so3,
    rodrigues_rotation,
    rot_z,
)

log = logging.getLogger(__name__)

BETA_MAX = math.pi / 4 - 1e-6
ETA = 0.25
POS_NOISE_STD = 0.01
VEL_NOISE_STD = 0.05


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 20
    control_dt: float = 1.0 / 20.0
    launch_distance: tuple[float, float] = (1.0, 2.0)
    flight_time: tuple[float, float] = (1.0, 1.5)
    # Launch height relative to the plate; sets the vertical arrival speed.
    launch_height: tuple[float, float] = (-2.0, -1.0)
    catch_radius: float = 0.2
    lead_time: tuple[float, float] = (0.08, 0.12)
    init_jitter_std: float = 0.02
    # Converts joint-angle magnitudes into plate translation (meters per radian).
    arm_length: float = 0.4
    exec_rotation: float = 0.05
    plate_home: tuple[float, float, float] = (0.0, 0.0, 1.0)
    # Reachable box around the home position (half-extents, meters).
    workspace: tuple[float, float, float] = (0.4, 0.4, 0.3)
    delta_max: float = 0.15
    success_speed: float = 0.1
    contact_tolerance: float = 0.01
    eta: float = ETA

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if not self.control_dt > 0:
            raise ConfigurationError("control_dt must be positive")
        for name in ("launch_distance", "flight_time", "launch_height", "lead_time"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"invalid interval for {name}: [{lo}, {hi}]")
        if self.flight_time[0] <= self.lead_time[1]:
            raise ConfigurationError("flight time must exceed the lead time")
        if min(self.workspace) <= 0:
            raise ConfigurationError("workspace extents must be positive")
        for name in ("catch_radius", "delta_max", "success_speed", "arm_length", "eta"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass
class MotionFrame:
    origin: np.ndarray
    yaw: np.ndarray

    def __getitem__(self, idx) -> "MotionFrame":
        return MotionFrame(self.origin[idx], self.yaw[idx])


def to_motion(vec, yaw) -> np.ndarray:
    """Apply R_z(yaw)^T to world-frame vectors."""
    c, s = np.cos(yaw), np.sin(yaw)
    x, y = vec[..., 0], vec[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y, vec[..., 2]], -1)


def from_motion(vec, yaw) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    x, y = vec[..., 0], vec[..., 1]
    return np.stack([c * x - s * y, s * x + c * y, vec[..., 2]], -1)


def build_motion_frame(plate_center, ball_position) -> MotionFrame:
    """Frame at the plate center, yawed so its X-Z plane contains the ball."""
    plate_center = np.asarray(plate_center, dtype=np.float64)
    off = np.asarray(ball_position, dtype=np.float64) - plate_center
    horizontal = np.hypot(off[..., 0], off[..., 1])
    yaw = np.where(horizontal > 1e-9, np.arctan2(off[..., 1], off[..., 0]), 0.0)
    return MotionFrame(plate_center.copy(), yaw)


def observe_state(ball_position, ball_velocity, plate_center, frame: MotionFrame) -> np.ndarray:
    """Task state (d, v) of balls in the motion frame.

    Works for ball arrays with one extra instance axis relative to the plate.
    """
    ball_position = np.asarray(ball_position)
    plate_center = np.asarray(plate_center)
    yaw = np.asarray(frame.yaw)
    if ball_position.ndim == plate_center.ndim + 1:
        plate_center = plate_center[..., None, :]
        yaw = yaw[..., None]
    d = to_motion(ball_position - plate_center, yaw)
    v = to_motion(np.asarray(ball_velocity), yaw)
    return np.concatenate([d, v], -1)


def plate_normal_in_frame(plate: PlateKinematics, frame: MotionFrame) -> np.ndarray:
    return to_motion(plate.normal, frame.yaw)


def tilt_observation(normal_motion) -> np.ndarray:
    """Plate tilt as (sin alpha, cos alpha, beta) recovered from its normal.

    The normal of ``rodrigues_rotation(alpha, beta)`` is
    (sin a sin b, -cos a sin b, cos b); alpha is taken as 0 for a flat plate.
    """
    n = np.asarray(normal_motion)
    sb = np.hypot(n[..., 0], n[..., 1])
    beta = np.arctan2(sb, n[..., 2])
    flat = sb < 1e-12
    alpha = np.where(flat, 0.0, np.arctan2(n[..., 0], -n[..., 1]))
    return np.stack([np.sin(alpha), np.cos(alpha), beta], -1)


def clamp_action(action, delta_max: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Project raw actions onto the valid set. Returns (action, was_clamped)."""
    return _clamp(np.asarray(action, dtype=np.float64), delta_max)


def _clamp(action, delta_max):
    delta = np.clip(action[..., :3], -delta_max, delta_max)
    alpha = np.mod(action[..., 3], 2 * math.pi)
    # Tiny negative angles round up to exactly 2*pi.
    alpha = np.where(alpha >= 2 * math.pi, 0.0, alpha)
    beta = np.clip(action[..., 4], 0.0, BETA_MAX)
    out = np.concatenate([delta, alpha[..., None], beta[..., None]], -1)
    clamped = np.any(delta != action[..., :3], -1) | (beta != action[..., 4])
    return out, clamped


def apply_action(action, frame: MotionFrame, plate_center, delta_max: float = 0.15):
    """Desired plate pose in the world frame for a motion-frame action.

    Out-of-range actions are clamped (logged at debug level).
    Returns ``(target_position, target_orientation)``.
    """
    action, clamped = _clamp(np.asarray(action, dtype=np.float64), delta_max)
    if np.any(clamped):
        log.debug("clamped %d action(s) into bounds", int(np.sum(clamped)))
    yaw = np.asarray(frame.yaw)
    target_pos = from_motion(action[..., :3], yaw) + np.asarray(plate_center)
    target_rot = rot_z(yaw) @ rodrigues_rotation(action[..., 3], action[..., 4])
    return target_pos, target_rot


def decompose(state, normal):
    """(d_perp, d_par, v_perp, v_par) relative to the plate normal."""
    state = np.asarray(state)
    normal = np.asarray(normal)
    d, v = state[..., :3], state[..., 3:]
    d_perp = (d * normal).sum(-1)
    v_perp = (v * normal).sum(-1)
    d_par = np.linalg.norm(d - d_perp[..., None] * normal, axis=-1)
    v_par = np.linalg.norm(v - v_perp[..., None] * normal, axis=-1)
    return d_perp, d_par, v_perp, v_par


def _check_unit(normal):
    norm = np.linalg.norm(normal, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-9):
        raise ValueError("plate normal must be unit length")


def clip_to_workspace(position, home, extent) -> np.ndarray:
    """Clamp target plate positions into the box ``home +- extent``."""
    home = np.asarray(home, dtype=np.float64)
    extent = np.asarray(extent, dtype=np.float64)
    return np.clip(position, home - extent, home + extent)


def compute_reward(state, normal, half_length: float = PLATE_HALF_LENGTH, eta: float = ETA) -> np.ndarray:
    """Velocity term plus the off-plate penalty."""
    normal = np.asarray(normal, dtype=np.float64)
    _check_unit(normal)
    d_perp, d_par, v_perp, v_par = decompose(state, normal)
    r_v = 0.5 * np.exp(-(v_par**2) / eta**2) + 0.5 * np.exp(-np.maximum(v_perp, -0.1) ** 2 / eta**2)
    r_p = -((d_perp < 0) | (d_par > half_length)).astype(np.float64)
    return r_v + r_p


def is_success(state, normal, radius, half_length: float = PLATE_HALF_LENGTH,
               contact_tolerance: float = 0.01, speed: float = 0.1) -> np.ndarray:
    """Ball on the plate (within one radius plus tolerance) and nearly still."""
    normal = np.asarray(normal, dtype=np.float64)
    _check_unit(normal)
    d_perp, d_par, _, _ = decompose(state, normal)
    vnorm = np.linalg.norm(np.asarray(state)[..., 3:], axis=-1)
    return (d_perp >= 0) & (d_par <= half_length) & (d_perp <= radius + contact_tolerance) & (vnorm < speed)


def ballistic_launch(launch_pos, arrival_pos, flight_time):
    """Initial velocity taking a projectile from ``launch_pos`` to ``arrival_pos``."""
    launch_pos = np.asarray(launch_pos, dtype=np.float64)
    arrival_pos = np.asarray(arrival_pos, dtype=np.float64)
    T = np.asarray(flight_time, dtype=np.float64)[..., None]
    if np.any(T <= 0):
        raise ConfigurationError("no ballistic solution for non-positive flight time")
    g = np.array([0.0, 0.0, -GRAVITY])
    return (arrival_pos - launch_pos - 0.5 * g * T**2) / T


def projectile(launch_pos, launch_vel, t):
    t = np.asarray(t, dtype=np.float64)[..., None]
    g = np.array([0.0, 0.0, -GRAVITY])
    return launch_pos + launch_vel * t + 0.5 * g * t**2, launch_vel + g * t


@dataclass
class EpisodeStart:
    ball: BallState
    plate: PlateKinematics
    frame: MotionFrame
    arrival: np.ndarray
    flight_time: np.ndarray
    lead_time: np.ndarray


def init_episode(rng: np.random.Generator, config: EpisodeConfig = EpisodeConfig(), n_envs: int = 1) -> EpisodeStart:
    """Sample thrown-ball episodes (batched over ``n_envs``)."""
    E = n_envs
    home = np.broadcast_to(np.asarray(config.plate_home, dtype=np.float64), (E, 3)).copy()
    dist = rng.uniform(*config.launch_distance, size=E)
    heading = rng.uniform(0.0, 2 * math.pi, size=E)
    T = rng.uniform(*config.flight_time, size=E)
    h0 = rng.uniform(*config.launch_height, size=E)
    rad = config.catch_radius * np.sqrt(rng.uniform(0.0, 1.0, size=E))
    ang = rng.uniform(0.0, 2 * math.pi, size=E)
    lead = rng.uniform(*config.lead_time, size=E)
    jitter_rot = rng.normal(0.0, config.init_jitter_std, size=(E, 3))
    jitter_pos = rng.normal(0.0, config.init_jitter_std * config.arm_length, size=(E, 3))

    launch = home + np.stack([dist * np.cos(heading), dist * np.sin(heading), h0], -1)
    arrival = home + np.stack([rad * np.cos(ang), rad * np.sin(ang), np.zeros(E)], -1)
    v0 = ballistic_launch(launch, arrival, T)
    pos, vel = projectile(launch, v0, T - lead)

    if config.init_jitter_std > 0:
        plate = PlateKinematics.at_rest(home + jitter_pos, exp_so3(jitter_rot))
    else:
        plate = PlateKinematics.at_rest(home)
    frame = build_motion_frame(plate.center, pos)
    return EpisodeStart(BallState(pos, vel), plate, frame, arrival, T, lead)


def inject_observation_noise(state, level: float, rng: np.random.Generator,
                             pos_std: float = POS_NOISE_STD, vel_std: float = VEL_NOISE_STD) -> np.ndarray:
    """Noisy copy of ``state``; the input array is not modified."""
    state = np.asarray(state, dtype=np.float64)
    if level == 0:
        return state.copy()
    std = level * np.array([pos_std] * 3 + [vel_std] * 3)
    return state + rng.normal(size=state.shape) * std


def inject_execution_error(target_position, target_orientation, rng: np.random.Generator,
                           translation: float = 0.02, rotation: float = 0.05, enabled: bool = True):
    """Uniformly perturb a target pose in translation and rotation."""
    target_position = np.asarray(target_position, dtype=np.float64)
    target_orientation = np.asarray(target_orientation, dtype=np.float64)
    if not enabled:
        return target_position.copy(), target_orientation.copy()
    shape = target_position.shape
    dp = rng.uniform(-translation, translation, size=shape)
    dr = rng.uniform(-rotation, rotation, size=shape)
    return target_position + dp, exp_so3(dr) @ target_orientation
