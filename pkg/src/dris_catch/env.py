"""Vectorized catching environments, each holding one instance set."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import physics
from .dris import InstanceSet, average_reward, init_dris, instance_rewards, project_states, propagate
from .physics import TRAINING_RANGES, ParamRanges, ServoGains
from .task import (
    EpisodeConfig,
    apply_action,
    clip_to_workspace,
    init_episode,
    inject_execution_error,
    inject_observation_noise,
    is_success,
    plate_normal_in_frame,
    tilt_observation,
)


@dataclass(frozen=True)
class PhysicsConfig:
    settling_time: float = 0.15
    substeps: int = physics.SUBSTEPS
    bounce_threshold: float = physics.BOUNCE_THRESHOLD
    ball_mass: float = physics.BALL_MASS
    half_length: float = physics.PLATE_HALF_LENGTH

    def __post_init__(self):
        if not self.settling_time > 0 or self.substeps < 1 or self.bounce_threshold < 0:
            raise physics.ConfigurationError("invalid physics config")

    def gains(self) -> ServoGains:
        return ServoGains.critically_damped(self.settling_time)


class CatchingEnv:
    """E parallel catching episodes with N ball instances each.

    ``step`` follows the training loop order: the reward is the instance
    average on the current states, then every instance is propagated under
    the shared action.
    """

    def __init__(self, n_envs: int, n_instances: int, rng: np.random.Generator,
                 episode: EpisodeConfig = EpisodeConfig(), physics_cfg: PhysicsConfig = PhysicsConfig(),
                 ranges: ParamRanges = TRAINING_RANGES, obs_noise: float = 0.0, exec_error: bool = False,
                 noise_rng: np.random.Generator | None = None):
        if n_envs < 1:
            raise physics.ConfigurationError("n_envs must be >= 1")
        if n_instances < 1:
            raise physics.ConfigurationError("instance set size must be >= 1")
        self.n_envs = n_envs
        self.n_instances = n_instances
        self.rng = rng
        self.noise_rng = noise_rng if noise_rng is not None else rng
        self.episode = episode
        self.physics = physics_cfg
        self.gains = physics_cfg.gains()
        self.ranges = ranges
        self.obs_noise = obs_noise
        self.exec_error = exec_error
        self.t = 0

    def reset(self, start=None, param_rng: np.random.Generator | None = None):
        """New episodes; ``start`` pins the initial states (one per env)."""
        if start is None:
            start = init_episode(self.rng, self.episode, self.n_envs)
        self.start = start
        self.plate = start.plate
        self.frame = start.frame
        self.instances: InstanceSet = init_dris(start.ball, self.n_instances, param_rng or self.rng, self.ranges)
        self.t = 0
        return self

    # -- observation ---------------------------------------------------------
    def true_states(self) -> np.ndarray:
        return project_states(self.instances, self.frame, self.plate)

    def observed_states(self) -> np.ndarray:
        return inject_observation_noise(self.true_states(), self.obs_noise, self.noise_rng)

    def normal(self) -> np.ndarray:
        return plate_normal_in_frame(self.plate, self.frame)

    def tilt(self) -> np.ndarray:
        return tilt_observation(self.normal())

    def instance_rewards(self) -> np.ndarray:
        per = instance_rewards(self.true_states(), self.normal(), self.physics.half_length, self.episode.eta)
        return np.where(self.instances.frozen, self.instances.frozen_reward, per)

    def reward(self) -> np.ndarray:
        return average_reward(self.true_states(), self.normal(), self.physics.half_length, self.episode.eta,
                              self.instances.frozen, self.instances.frozen_reward)

    def success(self) -> np.ndarray:
        """Per-instance success test on the current states, shape (E, N)."""
        normal = np.broadcast_to(self.normal()[:, None, :], (self.n_envs, self.n_instances, 3))
        return is_success(self.true_states(), normal, self.instances.params.radius, self.physics.half_length,
                          self.episode.contact_tolerance, self.episode.success_speed)

    @property
    def done(self) -> bool:
        return self.t >= self.episode.horizon or bool(np.all(self.instances.frozen))

    # -- dynamics ------------------------------------------------------------
    def target_pose(self, action):
        pos, rot = apply_action(action, self.frame, self.plate.center, self.episode.delta_max)
        if self.exec_error:
            pos, rot = inject_execution_error(pos, rot, self.noise_rng,
                                              self.episode.exec_rotation * self.episode.arm_length,
                                              self.episode.exec_rotation)
        return clip_to_workspace(pos, self.episode.plate_home, self.episode.workspace), rot

    def step(self, action, record: bool = False):
        """Reward of the current instance set, then propagate. Returns (reward, trajectory)."""
        per = self.instance_rewards()
        reward = per.mean(axis=-1)
        pos, rot = self.target_pose(action)
        before = self.instances.frozen.copy()
        self.instances, self.plate, traj = propagate(
            self.instances, self.plate, pos, rot, self.gains, self.episode.control_dt, self.physics.substeps,
            frame=self.frame, record=record, bounce_threshold=self.physics.bounce_threshold)
        newly = self.instances.frozen & ~before
        self.instances.frozen_reward = np.where(newly, per, self.instances.frozen_reward)
        self.t += 1
        return reward, traj


def random_actions(rng: np.random.Generator, n: int, delta_max: float = 0.15) -> np.ndarray:
    """Uniform random actions over the full action box."""
    delta = rng.uniform(-delta_max, delta_max, size=(n, 3))
    alpha = rng.uniform(0.0, 2 * math.pi, size=(n, 1))
    beta = rng.uniform(0.0, math.pi / 4, size=(n, 1))
    return np.concatenate([delta, alpha, beta], -1)
