"""Encoder pretraining, PPO over instance sets, baselines and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from .checkpoint import CheckpointError, ParamStore, load_checkpoint, save_checkpoint
from .env import CatchingEnv, PhysicsConfig, random_actions
from .networks import (
    DTYPE,
    AutoEncoder,
    SetEncoder,
    SetPolicy,
    TrainingFault,
    gaussian_log_prob,
)
from .physics import OOD_RANGES, TRAINING_RANGES, ConfigurationError, ParamRanges, SimulationFault
from .task import BETA_MAX, EpisodeConfig

log = logging.getLogger(__name__)

SCENARIOS = ("noise", "exec", "ood")


@dataclass(frozen=True)
class TrainConfig:
    n_envs: int = 64
    dris_size: int = 10
    epochs: int = 300
    ppo_epochs: int = 10
    minibatch: int = 256
    clip: float = 0.2
    gamma: float = 0.95
    gae_lambda: float = 0.95
    lr: float = 3e-4
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    train_encoder: bool = False
    train_obs_noise: float = 0.0
    obs_subsets: bool = True
    checkpoint_every: int = 25
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or f.name in ("seed", "train_obs_noise", "entropy_coef"):
                continue
            if not v > 0:
                raise ConfigurationError(f"{f.name} must be positive, got {v}")
        if self.dris_size < 1 or int(self.dris_size) != self.dris_size:
            raise ConfigurationError("dris_size must be an integer >= 1")
        if not 0 <= self.gamma < 1 or not 0 <= self.gae_lambda <= 1 or not 0 < self.clip < 1:
            raise ConfigurationError("gamma, gae_lambda or clip out of range")
        if self.train_obs_noise < 0 or self.entropy_coef < 0:
            raise ConfigurationError("train_obs_noise and entropy_coef must be >= 0")


def e2e_config(cfg: TrainConfig) -> TrainConfig:
    """The end-to-end baseline: single instance, encoder learned jointly."""
    return replace(cfg, dris_size=1, train_encoder=True)


# -- encoder pretraining --------------------------------------------------------

def collect_encoder_dataset(rng: np.random.Generator, n_envs: int = 64, episodes: int = 50, n_instances: int = 200,
                            episode: EpisodeConfig = EpisodeConfig(), physics_cfg: PhysicsConfig = PhysicsConfig(),
                            ranges: ParamRanges = TRAINING_RANGES) -> np.ndarray:
    """Instance-set states seen under uniformly random actions.

    Returns an array of shape (n_envs * episodes * horizon, n_instances, 6).
    """
    out = []
    env = CatchingEnv(n_envs, n_instances, rng, episode, physics_cfg, ranges)
    for ep in range(episodes):
        env.reset()
        for t in range(episode.horizon):
            out.append(env.true_states())
            try:
                env.step(random_actions(rng, n_envs, episode.delta_max))
            except SimulationFault as exc:
                raise SimulationFault(f"dataset episode {ep} step {t}: {exc}", getattr(exc, "index", None)) from exc
    # Sample-major order: env, episode, step.
    data = np.stack(out, 0).reshape(episodes, episode.horizon, n_envs, n_instances, 6)
    return np.ascontiguousarray(data.transpose(2, 0, 1, 3, 4).reshape(-1, n_instances, 6))


def pretrain_encoder(dataset: np.ndarray, epochs: int, rng: np.random.Generator, lr: float = 1e-3,
                     batch_size: int = 64, max_samples: int | None = None, autoencoder: AutoEncoder | None = None,
                     subsets: bool = True):
    """Fit a set autoencoder by Chamfer reconstruction.

    With ``subsets`` each minibatch keeps a random subset of the recorded
    instances, its size log-uniform between 1 and N, so the encoder also
    sees the small sets it receives during training and single-ball
    evaluation. Returns ``(autoencoder, losses)`` with one mean loss per
    epoch. The encoder is returned frozen.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 3 or dataset.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (samples, N, 6) array")
    ae = autoencoder if autoencoder is not None else AutoEncoder(rng, dataset.shape[1])
    ae.requires_grad_(True)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    data = torch.from_numpy(dataset)
    losses = []
    last_good = {k: v.clone() for k, v in ae.state_dict().items()}
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        if max_samples is not None:
            order = order[:max_samples]
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start:start + batch_size])
            batch = data[idx]
            if subsets and dataset.shape[1] > 1:
                k = int(np.exp(rng.uniform(0.0, math.log(dataset.shape[1]))))
                batch = batch[:, torch.from_numpy(rng.choice(dataset.shape[1], k, replace=False))]
            loss = ae.reconstruction_loss(batch, expanded=True).mean()
            if not torch.isfinite(loss):
                ae.load_state_dict(last_good)
                raise TrainingFault(f"pretraining diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        last_good = {k: v.clone() for k, v in ae.state_dict().items()}
        log.info("pretrain epoch %d loss %.6f", epoch, losses[-1])
    ae.encoder.requires_grad_(False)
    return ae, losses


def reconstruction_error(ae: AutoEncoder, dataset: np.ndarray) -> float:
    with torch.no_grad():
        return ae.reconstruction_loss(torch.from_numpy(np.asarray(dataset, dtype=np.float64))).mean().item()


# -- rollouts -----------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    """Time-major (T, E, ...) arrays from one synchronized batch of episodes."""

    latents: np.ndarray
    tilts: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    valid: np.ndarray
    last_values: np.ndarray
    lengths: np.ndarray
    success: np.ndarray
    states: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        T, E = self.rewards.shape
        for name in ("latents", "tilts", "actions", "log_probs", "values", "dones", "valid"):
            if getattr(self, name).shape[:2] != (T, E):
                raise ValueError(f"buffer field {name} has inconsistent length")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("non-finite reward in buffer")

    def __len__(self) -> int:
        return int(self.valid.sum())

    def advantages(self, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
        """GAE advantages and returns, recomputed from the stored rewards."""
        return compute_gae(self.rewards, self.values, self.dones, self.last_values, gamma, lam)


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimation over time-major arrays.

    ``dones[t]`` marks that the episode ended after step t with no bootstrap.
    ``last_values`` bootstraps the step after the final one.
    """
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    gae = np.zeros_like(rewards[0])
    for t in reversed(range(T)):
        next_v = last_values if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        gae = delta + gamma * lam * live * gae
        adv[t] = gae
    return adv, adv + values


def _policy_inputs(policy: SetPolicy, states: np.ndarray, tilt: np.ndarray):
    s = torch.from_numpy(np.ascontiguousarray(states))
    u = torch.from_numpy(np.ascontiguousarray(tilt))
    with torch.no_grad():
        z = policy.encoder(s)
        mean = policy.actor_critic.action_mean(z, u)
        value = policy.actor_critic.value(z, u)
    return z, u, mean, value


def observed_subset(states: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Keep the first ``sizes[e]`` instances of env ``e``; later slots repeat instance 0.

    Max-pooling ignores duplicates, so the encoding equals that of the smaller set.
    """
    keep = np.arange(states.shape[1])[None, :] < np.asarray(sizes)[:, None]
    return np.where(keep[..., None], states, states[:, :1])


def subset_sizes(rng: np.random.Generator, n_envs: int, n: int) -> np.ndarray:
    """Per-env observed set sizes, log-uniform on [1, n]."""
    return np.minimum(np.exp(rng.uniform(0.0, math.log(n + 1), size=n_envs)).astype(np.int64), n)


def rollout(policy: SetPolicy, env: CatchingEnv, rng: np.random.Generator, obs_noise: float = 0.0,
            obs_sizes: np.ndarray | None = None) -> RolloutBuffer:
    """Run one batch of episodes with actions sampled from the policy.

    The reward at each step is the instance average on the states the action
    was chosen from. An environment whose instances have all escaped stops
    contributing samples. With ``obs_sizes`` the policy of env ``e`` observes
    only its first ``obs_sizes[e]`` instances while the reward still averages
    over all of them.
    """
    env.reset()
    E, T = env.n_envs, env.episode.horizon
    std = torch.exp(policy.actor_critic.log_std).detach().numpy()
    rec = {k: [] for k in ("z", "u", "a", "lp", "v", "r", "d", "valid", "s")}
    alive = np.ones(E, dtype=bool)
    lengths = np.zeros(E, dtype=np.int64)
    for t in range(T):
        states = env.true_states()
        obs = states if obs_noise == 0 else env.observed_states()
        if obs_sizes is not None:
            obs = observed_subset(obs, obs_sizes)
        tilt = env.tilt()
        z, u, mean, value = _policy_inputs(policy, obs, tilt)
        action = mean.numpy() + std * rng.standard_normal((E, 5))
        lp = gaussian_log_prob(torch.from_numpy(action), mean, policy.actor_critic.log_std.detach()).numpy()
        reward, _ = env.step(action)
        all_frozen = np.all(env.instances.frozen, axis=-1)
        done = np.where(alive, all_frozen, True)
        for k, v in zip(rec, (z.numpy(), tilt, action, lp, value.numpy(), np.where(alive, reward, 0.0),
                              done.astype(np.float64), alive.copy(), obs)):
            rec[k].append(v)
        lengths += alive
        alive &= ~all_frozen
        if not alive.any():
            break
    last = env.true_states() if obs_noise == 0 else env.observed_states()
    if obs_sizes is not None:
        last = observed_subset(last, obs_sizes)
    _, _, _, last_v = _policy_inputs(policy, last, env.tilt())
    success = np.mean(env.success(), axis=-1)
    st = {k: np.stack(v) for k, v in rec.items()}
    return RolloutBuffer(st["z"], st["u"], st["a"], st["lp"], st["v"], st["r"], st["d"], st["valid"],
                         last_v.numpy(), lengths, success, states=st["s"] if policy.train_encoder else None)


# -- PPO ------------------------------------------------------------------------------

def ppo_loss(policy: SetPolicy, batch: dict, cfg: TrainConfig):
    """Clipped surrogate, value and entropy terms for one minibatch."""
    ac = policy.actor_critic
    z = policy.encoder(batch["states"]) if policy.train_encoder else batch["latents"]
    mean = ac.action_mean(z, batch["tilts"])
    lp = ac.log_prob(batch["actions"], mean)
    ratio = torch.exp(lp - batch["log_probs"])
    adv = batch["adv"]
    surrogate = torch.min(ratio * adv, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv).mean()
    value = ac.value(z, batch["tilts"])
    value_loss = 0.5 * ((value - batch["returns"]) ** 2).mean()
    entropy = ac.entropy()
    loss = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    with torch.no_grad():
        stats = {
            "clip_frac": ((ratio - 1).abs() > cfg.clip).double().mean().item(),
            "approx_kl": ((ratio - 1) - torch.log(ratio)).mean().item(),
        }
    return loss, surrogate, value_loss, stats


def flatten_buffer(buffer: RolloutBuffer, cfg: TrainConfig, normalize: bool = True) -> dict:
    adv, ret = buffer.advantages(cfg.gamma, cfg.gae_lambda)
    m = buffer.valid
    out = {
        "latents": buffer.latents[m], "tilts": buffer.tilts[m], "actions": buffer.actions[m],
        "log_probs": buffer.log_probs[m], "adv": adv[m], "returns": ret[m], "values": buffer.values[m],
    }
    if buffer.states is not None:
        out["states"] = buffer.states[m]
    if normalize and len(out["adv"]) > 1:
        a = out["adv"]
        out["adv"] = (a - a.mean()) / (a.std() + 1e-8)
    return {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in out.items()}


def ppo_update(policy: SetPolicy, optimizer: torch.optim.Optimizer, buffer: RolloutBuffer, cfg: TrainConfig,
               rng: np.random.Generator) -> dict:
    """Several epochs of minibatch PPO on one buffer. Returns averaged stats."""
    data = flatten_buffer(buffer, cfg)
    n = len(data["adv"])
    params = [p for p in policy.parameters() if p.requires_grad]
    acc = {"clip_frac": 0.0, "approx_kl": 0.0, "value_loss": 0.0, "surrogate": 0.0}
    steps, skipped = 0, 0
    for _ in range(cfg.ppo_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = torch.from_numpy(order[start:start + cfg.minibatch])
            batch = {k: v[idx] for k, v in data.items()}
            loss, surr, vloss, stats = ppo_loss(policy, batch, cfg)
            if not torch.isfinite(loss):
                skipped += 1
                log.warning("non-finite PPO loss, update skipped")
                continue
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            optimizer.step()
            _check_params(policy)
            steps += 1
            acc["clip_frac"] += stats["clip_frac"]
            acc["approx_kl"] += stats["approx_kl"]
            acc["value_loss"] += vloss.item()
            acc["surrogate"] += surr.item()
    out = {k: v / max(steps, 1) for k, v in acc.items()}
    ret, val = data["returns"].numpy(), data["values"].numpy()
    var = np.var(ret)
    out["explained_variance"] = float(1 - np.var(ret - val) / var) if var > 0 else 0.0
    out["skipped"] = skipped
    return out


def _check_params(module: torch.nn.Module):
    for name, p in module.named_parameters():
        if not torch.all(torch.isfinite(p)):
            raise TrainingFault(f"non-finite parameter {name}")


def make_policy(cfg: TrainConfig, rng: np.random.Generator, encoder: SetEncoder | None = None,
                delta_max: float = 0.15) -> SetPolicy:
    if not cfg.train_encoder and encoder is None:
        raise ConfigurationError("a pretrained encoder is required unless the encoder is trained")
    return SetPolicy(rng, delta_max, encoder=encoder, train_encoder=cfg.train_encoder)


def make_optimizer(policy: SetPolicy, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam([p for p in policy.parameters() if p.requires_grad], lr=cfg.lr)


class Trainer:
    """Holds all mutable training state so a run can be checkpointed and resumed."""

    def __init__(self, cfg: TrainConfig, encoder: SetEncoder | None = None,
                 episode: EpisodeConfig = EpisodeConfig(), physics_cfg: PhysicsConfig = PhysicsConfig()):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        init_rng = np.random.default_rng(seeds[0])
        self.env_rng = np.random.default_rng(seeds[1])
        self.rng = np.random.default_rng(seeds[2])
        self.policy = make_policy(cfg, init_rng, encoder, episode.delta_max)
        self.optimizer = make_optimizer(self.policy, cfg)
        self.env = CatchingEnv(cfg.n_envs, cfg.dris_size, self.env_rng, episode, physics_cfg)
        self.epoch = 0
        self.history: list[dict] = []

    def train_epoch(self) -> dict:
        sizes = None
        if self.cfg.obs_subsets and self.cfg.dris_size > 1:
            sizes = subset_sizes(self.rng, self.cfg.n_envs, self.cfg.dris_size)
        buf = rollout(self.policy, self.env, self.rng, self.cfg.train_obs_noise, sizes)
        stats = ppo_update(self.policy, self.optimizer, buf, self.cfg, self.rng)
        row = {
            "epoch": self.epoch,
            "mean_return": float(buf.rewards.sum(0).mean()),
            "success": float(buf.success.mean()),
            **stats,
        }
        self.history.append(row)
        self.epoch += 1
        return row

    def run(self, epochs: int | None = None, callback=None):
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            row = self.train_epoch()
            log.info("epoch %d return %.3f success %.3f", row["epoch"], row["mean_return"], row["success"])
            if callback is not None:
                callback(self, row)
        return self.history

    # -- state capture for checkpointing ----------------------------------------------
    def rng_state(self) -> dict:
        return {"env_rng": self.env_rng.bit_generator.state, "rng": self.rng.bit_generator.state,
                "epoch": self.epoch}

    def set_rng_state(self, state: dict):
        self.env_rng.bit_generator.state = state["env_rng"]
        self.rng.bit_generator.state = state["rng"]
        self.epoch = int(state["epoch"])


# -- checkpoints ----------------------------------------------------------------------

def _optimizer_tensors(optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    sd = optimizer.state_dict()
    for idx, st in sd["state"].items():
        for key in ("step", "exp_avg", "exp_avg_sq"):
            out[f"optim.{idx}.{key}"] = torch.as_tensor(st[key]).detach().double().numpy()
    return out


def _restore_optimizer(optimizer: torch.optim.Optimizer, store: ParamStore) -> None:
    sd = optimizer.state_dict()
    params = sd["param_groups"][0]["params"]
    state = {}
    for idx in params:
        if f"optim.{idx}.step" not in store:
            continue
        ref = [p for g in optimizer.param_groups for p in g["params"]][idx]
        state[idx] = {
            "step": torch.tensor(float(store[f"optim.{idx}.step"])),
            "exp_avg": torch.from_numpy(store[f"optim.{idx}.exp_avg"].copy()).to(ref.dtype),
            "exp_avg_sq": torch.from_numpy(store[f"optim.{idx}.exp_avg_sq"].copy()).to(ref.dtype),
        }
    sd["state"] = state
    optimizer.load_state_dict(sd)


def save_trainer(trainer: "Trainer", path, extra: dict | None = None) -> None:
    """Policy, optimizer moments, RNG streams and history in one file."""
    meta = {
        "kind": "trainer",
        "config": {f.name: getattr(trainer.cfg, f.name) for f in fields(trainer.cfg)},
        "delta_max": trainer.policy.actor_critic.delta_max,
        "state": trainer.rng_state(),
        "history": trainer.history,
        **(extra or {}),
    }
    store = ParamStore.from_module(trainer.policy, "policy.", meta)
    for k, v in _optimizer_tensors(trainer.optimizer).items():
        store.add(k, v)
    save_checkpoint(store, path)


def load_trainer(path, episode: EpisodeConfig = EpisodeConfig(),
                 physics_cfg: PhysicsConfig = PhysicsConfig()) -> "Trainer":
    store = load_checkpoint(path)
    if store.metadata.get("kind") != "trainer":
        raise CheckpointError(f"{path} is not a training checkpoint")
    cfg = TrainConfig(**store.metadata["config"])
    encoder = SetEncoder(np.random.default_rng(0))
    store.subset("policy.encoder.").load_into(encoder)
    trainer = Trainer(cfg, encoder=None if cfg.train_encoder else encoder, episode=episode, physics_cfg=physics_cfg)
    store.load_into(trainer.policy, "policy.")
    _restore_optimizer(trainer.optimizer, store)
    trainer.set_rng_state(store.metadata["state"])
    trainer.history = list(store.metadata["history"])
    return trainer


def load_policy(path) -> SetPolicy:
    """The policy held in a training checkpoint, ready for evaluation."""
    store = load_checkpoint(path)
    if store.metadata.get("kind") != "trainer":
        raise CheckpointError(f"{path} is not a training checkpoint")
    policy = SetPolicy(np.random.default_rng(0), store.metadata["delta_max"],
                       train_encoder=store.metadata["config"]["train_encoder"])
    store.load_into(policy, "policy.")
    policy.requires_grad_(False)
    return policy


def save_encoder(ae: AutoEncoder, path, metadata: dict | None = None) -> None:
    save_checkpoint(ParamStore.from_module(ae, "", {"kind": "autoencoder", **(metadata or {})}), path)


def load_autoencoder(path) -> AutoEncoder:
    store = load_checkpoint(path)
    if store.metadata.get("kind") != "autoencoder":
        raise CheckpointError(f"{path} is not an encoder checkpoint")
    n_out = store["decoder.layers.1.bias"].shape[0] // 6
    ae = AutoEncoder(np.random.default_rng(0), n_out)
    store.load_into(ae)
    ae.encoder.requires_grad_(False)
    return ae


# -- baselines and evaluation -------------------------------------------------------

def veltrack_action(state, impacted, control_dt: float = 0.05) -> np.ndarray:
    """Hand-crafted baseline action for motion-frame states of shape (..., 6).

    Before the first impact the plate faces the incoming ball without moving.
    Afterwards it stays flat and follows the ball's horizontal velocity.
    """
    state = np.asarray(state, dtype=np.float64)
    impacted = np.asarray(impacted, dtype=bool)
    v = state[..., 3:]
    speed_h = np.hypot(v[..., 0], v[..., 1])
    alpha = np.where(speed_h > 0, np.arctan2(-v[..., 0], v[..., 1]), 0.0)
    beta = np.minimum(np.arctan2(speed_h, np.abs(v[..., 2])), BETA_MAX)
    zeros = np.zeros_like(alpha)
    pre = np.stack([zeros, zeros, zeros, np.mod(alpha, 2 * math.pi), beta], -1)
    post = np.stack([v[..., 0] * control_dt, v[..., 1] * control_dt, zeros, zeros, zeros], -1)
    return np.where(impacted[..., None], post, pre)


def veltrack_policy(state, impacted: bool, control_dt: float = 0.05) -> np.ndarray:
    return veltrack_action(state, impacted, control_dt)


class VelTrack:
    """Stateful wrapper tracking the first-impact flag per episode."""

    name = "veltrack"

    def __init__(self, control_dt: float = 0.05):
        self.control_dt = control_dt

    def reset(self, n: int):
        self.impacted = np.zeros(n, dtype=bool)
        self.prev_vz = None

    def act(self, states: np.ndarray, tilt: np.ndarray) -> np.ndarray:
        s = states[:, 0]
        vz = s[:, 5]
        if self.prev_vz is not None:
            self.impacted |= (self.prev_vz < 0) & (vz > self.prev_vz + 0.5)
        self.prev_vz = vz
        return veltrack_action(s, self.impacted, self.control_dt)


class DeterministicPolicy:
    """Zero-shot inference: the observed state is a set of size one."""

    def __init__(self, policy: SetPolicy, name: str = "policy"):
        self.policy = policy
        self.name = name

    def reset(self, n: int):
        pass

    def act(self, states: np.ndarray, tilt: np.ndarray) -> np.ndarray:
        _, _, mean, _ = _policy_inputs(self.policy, states, tilt)
        return mean.numpy()


@dataclass(frozen=True)
class EvalResult:
    policy: str
    scenario: str
    level: float
    episodes: int
    mean_reward: float
    reward_lo: float
    reward_hi: float
    success: float
    success_lo: float
    success_hi: float

    def row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def bootstrap_ci(values, rng: np.random.Generator, resamples: int = 2000, level: float = 0.95):
    """Percentile bootstrap interval of the mean."""
    values = np.asarray(values, dtype=np.float64)
    idx = rng.integers(0, len(values), size=(resamples, len(values)))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    m = values.mean()
    return float(min(lo, m)), float(max(hi, m))


def evaluate(policy, scenario: str = "noise", level: float = 0.0, episodes: int = 512, seed: int = 0,
             episode: EpisodeConfig = EpisodeConfig(), physics_cfg: PhysicsConfig = PhysicsConfig(),
             batch: int = 256) -> EvalResult:
    """Single-ball evaluation of ``policy`` under one perturbation scenario.

    ``scenario`` is ``noise`` (observation noise of the given level),
    ``exec`` (execution error) or ``ood`` (restitution outside training).
    """
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if episodes < 1:
        raise ConfigurationError("episodes must be >= 1")
    if isinstance(policy, SetPolicy):
        policy = DeterministicPolicy(policy)
    ranges = OOD_RANGES if scenario == "ood" else TRAINING_RANGES
    noise = float(level) if scenario == "noise" else 0.0
    seeds = np.random.SeedSequence(seed).spawn(3)
    rng, noise_rng, boot_rng = (np.random.default_rng(s) for s in seeds)
    rewards, successes = [], []
    done = 0
    while done < episodes:
        n = min(batch, episodes - done)
        env = CatchingEnv(n, 1, rng, episode, physics_cfg, ranges, obs_noise=noise,
                          exec_error=scenario == "exec", noise_rng=noise_rng).reset()
        policy.reset(n)
        total = np.zeros(n)
        for _ in range(episode.horizon):
            action = policy.act(env.observed_states(), env.tilt())
            r, _ = env.step(action)
            total += r
        rewards.append(total)
        successes.append(env.success()[:, 0].astype(np.float64))
        done += n
    rewards = np.concatenate(rewards)
    successes = np.concatenate(successes)
    r_lo, r_hi = bootstrap_ci(rewards, boot_rng)
    s_lo, s_hi = bootstrap_ci(successes, boot_rng)
    return EvalResult(getattr(policy, "name", "policy"), scenario, float(level), episodes,
                      float(rewards.mean()), r_lo, r_hi, float(successes.mean()), s_lo, s_hi)


def write_metrics(path, results) -> None:
    results = list(results)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(EvalResult.__dataclass_fields__), lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})


def write_history(path, history: list[dict]) -> None:
    if not history:
        raise ValueError("empty training history")
    with open(path, "w", newline="") as fh:
        # Fixed column order: restored histories come back with sorted keys.
        lead = [k for k in ("epoch", "mean_return", "success") if k in history[0]]
        fields = lead + sorted(k for k in history[0] if k not in lead)
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
