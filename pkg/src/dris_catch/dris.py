"""Domain-Randomized Instance Sets.

An instance set holds N balls that start from one shared state but carry
independently sampled physical parameters. Every instance is driven by the
same plate trajectory, so propagating the set is the same as simulating each
ball on its own against that trajectory.

Arrays are batched as ``(E, N, ...)``: E environments, N instances each.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import (
    DEFAULT_GAINS,
    PLATE_HALF_LENGTH,
    TRAINING_RANGES,
    BallParams,
    BallState,
    ConfigurationError,
    ParamRanges,
    PlateKinematics,
    ServoGains,
    sample_domain_params,
    step_world,
)
from .task import ETA, MotionFrame, compute_reward, observe_state

ESCAPE_BOUND = 5.0


@dataclass
class InstanceSet:
    state: BallState
    params: BallParams
    frozen: np.ndarray
    # Reward at the moment each frozen instance escaped.
    frozen_reward: np.ndarray

    @property
    def size(self) -> int:
        return self.state.position.shape[-2]

    def copy(self) -> "InstanceSet":
        return InstanceSet(self.state.copy(), BallParams(*(np.copy(a) for a in vars(self.params).values())),
                           self.frozen.copy(), self.frozen_reward.copy())


def init_dris(s0: BallState, n: int, rng: np.random.Generator,
              ranges: ParamRanges = TRAINING_RANGES) -> InstanceSet:
    """Replicate ``s0`` (batch shape (E,)) N times with fresh parameters."""
    if int(n) != n or n < 1:
        raise ConfigurationError(f"instance set size must be >= 1, got {n}")
    pos = np.asarray(s0.position, dtype=np.float64)
    vel = np.asarray(s0.velocity, dtype=np.float64)
    batch = pos.shape[:-1]
    shape = batch + (int(n),)
    state = BallState(np.repeat(pos[..., None, :], n, axis=-2), np.repeat(vel[..., None, :], n, axis=-2))
    params = sample_domain_params(rng, ranges, size=shape)
    return InstanceSet(state, params, np.zeros(shape, dtype=bool), np.zeros(shape))


def propagate(iset: InstanceSet, plate: PlateKinematics, target_position, target_orientation,
              gains: ServoGains = DEFAULT_GAINS, dt: float = 1.0 / 20.0, substeps: int = 12,
              frame: MotionFrame | None = None, record: bool = False, bounce_threshold: float | None = None):
    """Advance every instance one control period under the shared plate command.

    Instances leaving the +-5 m box around the frame origin are frozen.
    Returns ``(instance_set, plate, trajectory_or_None)``.
    """
    kwargs = {} if bounce_threshold is None else {"bounce_threshold": bounce_threshold}
    state, plate, traj = step_world(iset.state, iset.params, plate, target_position, target_orientation,
                                    gains, dt, substeps, frozen=iset.frozen, record=record, **kwargs)
    out = InstanceSet(state, iset.params, iset.frozen.copy(), iset.frozen_reward.copy())
    if frame is not None:
        rel = state.position - np.asarray(frame.origin)[..., None, :]
        out.frozen |= np.any(np.abs(rel) > ESCAPE_BOUND, axis=-1)
    return out, plate, traj


def project_states(iset: InstanceSet, frame: MotionFrame, plate: PlateKinematics) -> np.ndarray:
    """Motion-frame task states of every instance, shape (E, N, 6), order preserved."""
    return observe_state(iset.state.position, iset.state.velocity, plate.center, frame)


def average_reward(states, normal, half_length: float = PLATE_HALF_LENGTH, eta: float = ETA,
                   frozen=None, frozen_reward=None) -> np.ndarray:
    """Mean per-instance reward over the last axis of ``states``.

    ``normal`` has one fewer axis than the per-instance states; frozen
    instances contribute their stored reward.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim < 2 or states.shape[-2] == 0:
        raise ValueError("average_reward needs a non-empty collection of states")
    per = instance_rewards(states, normal, half_length, eta)
    if frozen is not None:
        per = np.where(frozen, frozen_reward, per)
    return per.mean(axis=-1)


def instance_rewards(states, normal, half_length: float = PLATE_HALF_LENGTH, eta: float = ETA) -> np.ndarray:
    normal = np.asarray(normal, dtype=np.float64)
    return compute_reward(states, np.broadcast_to(normal[..., None, :], np.shape(states)[:-1] + (3,)),
                          half_length, eta)
