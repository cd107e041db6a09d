import math
from dataclasses import fields, replace

import numpy as np
import pytest
import torch

from dris_catch import training as tr
from dris_catch.dris import average_reward
from dris_catch.env import CatchingEnv
from dris_catch.networks import AutoEncoder, SetEncoder, SetPolicy
from dris_catch.physics import OOD_RANGES, TRAINING_RANGES, ConfigurationError, rodrigues_rotation
from dris_catch.task import EpisodeConfig


def frozen_encoder(seed=0):
    enc = SetEncoder(np.random.default_rng(seed))
    enc.requires_grad_(False)
    return enc


# -- GAE ----------------------------------------------------------------------------

def gae_oracle(rewards, values, dones, last, gamma, lam):
    """Per-environment scalar recursion written out longhand."""
    T, E = len(rewards), len(rewards[0])
    adv = [[0.0] * E for _ in range(T)]
    for e in range(E):
        running = 0.0
        for t in range(T - 1, -1, -1):
            nv = last[e] if t == T - 1 else values[t + 1][e]
            nonterminal = 0.0 if dones[t][e] else 1.0
            delta = rewards[t][e] + gamma * nv * nonterminal - values[t][e]
            running = delta + gamma * lam * nonterminal * running
            adv[t][e] = running
    return np.array(adv)


def test_gae_matches_scalar_recursion():
    rng = np.random.default_rng(0)
    T, E = 20, 7
    r = rng.normal(size=(T, E))
    v = rng.normal(size=(T, E))
    d = (rng.random((T, E)) < 0.1).astype(float)
    last = rng.normal(size=E)
    adv, ret = tr.compute_gae(r, v, d, last, 0.95, 0.9)
    np.testing.assert_allclose(adv, gae_oracle(r, v, d, last, 0.95, 0.9), atol=1e-12)
    np.testing.assert_allclose(ret, adv + v, atol=1e-15)


def test_gae_with_unit_lambda_is_discounted_return_minus_value():
    r = np.ones((5, 1))
    v = np.zeros((5, 1))
    adv, _ = tr.compute_gae(r, v, np.zeros((5, 1)), np.zeros(1), 0.5, 1.0)
    np.testing.assert_allclose(adv[:, 0], [sum(0.5**k for k in range(5 - t)) for t in range(5)])


# -- PPO surrogate --------------------------------------------------------------------

def _batch(policy, n, rng, adv, ratio=None):
    z = torch.from_numpy(rng.normal(size=(n, 64)))
    u = torch.tensor([[0.0, 1.0, 0.0]] * n, dtype=torch.float64)
    with torch.no_grad():
        mean = policy.actor_critic.action_mean(z, u)
    a = mean + 0.05 * torch.from_numpy(rng.normal(size=(n, 5)))
    with torch.no_grad():
        lp = policy.actor_critic.log_prob(a, mean)
    old = lp if ratio is None else lp - torch.log(torch.tensor(ratio, dtype=torch.float64))
    return {"latents": z, "tilts": u, "actions": a, "log_probs": old, "adv": torch.tensor(adv, dtype=torch.float64),
            "returns": torch.zeros(n, dtype=torch.float64)}


def _actor_grads(policy, value):
    params = [p for n, p in policy.actor_critic.named_parameters() if not n.startswith("value")]
    return torch.autograd.grad(value, params, allow_unused=True)


def test_zero_advantage_gives_zero_surrogate_gradient():
    policy = SetPolicy(np.random.default_rng(1), encoder=frozen_encoder())
    batch = _batch(policy, 16, np.random.default_rng(2), [0.0] * 16)
    _, surr, _, _ = tr.ppo_loss(policy, batch, tr.TrainConfig())
    for g in _actor_grads(policy, surr):
        assert g is None or torch.all(g == 0)


def test_clipped_surrogate_against_hand_computation():
    policy = SetPolicy(np.random.default_rng(3), encoder=frozen_encoder())
    # Sample 0 sits above the clip range, sample 1 below; both have advantage +1.
    batch = _batch(policy, 2, np.random.default_rng(4), [1.0, 1.0], ratio=[1.5, 0.5])
    _, surr, _, stats = tr.ppo_loss(policy, batch, tr.TrainConfig(clip=0.2))
    assert surr.item() == pytest.approx((1.2 + 0.5) / 2, abs=1e-12)
    assert stats["clip_frac"] == 1.0
    # Only the unclipped sample carries gradient: d/dθ of 0.5 * ratio_1.
    mean = policy.actor_critic.action_mean(batch["latents"][1:], batch["tilts"][1:])
    lp = policy.actor_critic.log_prob(batch["actions"][1:], mean)
    expected = 0.5 * torch.exp(lp - batch["log_probs"][1:]).sum()
    for g, h in zip(_actor_grads(policy, surr), _actor_grads(policy, expected)):
        if g is None:
            assert h is None or torch.all(h == 0)
        else:
            torch.testing.assert_close(g, h, atol=1e-12, rtol=1e-9)


def test_negative_advantage_clips_below():
    policy = SetPolicy(np.random.default_rng(5), encoder=frozen_encoder())
    batch = _batch(policy, 2, np.random.default_rng(6), [-1.0, -1.0], ratio=[1.5, 0.5])
    _, surr, _, _ = tr.ppo_loss(policy, batch, tr.TrainConfig(clip=0.2))
    # min(-1.5, -1.2) = -1.5 and min(-0.5, -0.8) = -0.8
    assert surr.item() == pytest.approx((-1.5 - 0.8) / 2, abs=1e-12)


def test_bandit_mean_action_converges_to_optimum():
    rng = np.random.default_rng(7)
    policy = SetPolicy(np.random.default_rng(8), encoder=frozen_encoder())
    cfg = tr.TrainConfig(lr=3e-3, minibatch=128, ppo_epochs=4, entropy_coef=0.0)
    opt = tr.make_optimizer(policy, cfg)
    target, E = 0.08, 256
    z = policy.encoder(torch.zeros(1, 1, 6)).expand(E, -1)
    u = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64).expand(E, -1)
    for _ in range(200):
        with torch.no_grad():
            mean = policy.actor_critic.action_mean(z, u)
            std = torch.exp(policy.actor_critic.log_std)
        a = mean + std * torch.from_numpy(rng.standard_normal((E, 5)))
        lp = policy.actor_critic.log_prob(a, mean).detach()
        reward = -100.0 * (a[:, 0] - target) ** 2
        buf = tr.RolloutBuffer(z.numpy()[None], u.numpy()[None], a.numpy()[None], lp.numpy()[None],
                               np.zeros((1, E)), reward.numpy()[None], np.ones((1, E)), np.ones((1, E), dtype=bool),
                               np.zeros(E), np.ones(E, dtype=int), np.zeros(E))
        tr.ppo_update(policy, opt, buf, cfg, rng)
    with torch.no_grad():
        final = policy.actor_critic.action_mean(z[:1], u[:1])[0, 0].item()
    assert abs(final - target) < 0.05


def test_ppo_update_reports_stats():
    trainer = tr.Trainer(tr.TrainConfig(n_envs=4, dris_size=2, minibatch=32), encoder=frozen_encoder())
    row = trainer.train_epoch()
    for key in ("clip_frac", "approx_kl", "explained_variance", "value_loss", "mean_return", "success"):
        assert math.isfinite(row[key])


# -- rollouts ---------------------------------------------------------------------------

def test_rollout_rewards_match_recomputation():
    policy = SetPolicy(np.random.default_rng(9), train_encoder=True)
    env = CatchingEnv(6, 4, np.random.default_rng(10))
    buf = tr.rollout(policy, env, np.random.default_rng(11))
    assert buf.rewards.shape == (20, 6)
    assert len(buf) == int(buf.valid.sum()) <= 6 * 20
    assert buf.valid[0].all()
    sa, ca, beta = buf.tilts[..., 0], buf.tilts[..., 1], buf.tilts[..., 2]
    normal = np.stack([sa * np.sin(beta), -ca * np.sin(beta), np.cos(beta)], -1)
    recomputed = average_reward(buf.states, normal)
    np.testing.assert_allclose(buf.rewards, np.where(buf.valid, recomputed, 0.0), atol=1e-12)


def test_observed_subset_encodes_like_the_smaller_set():
    enc = frozen_encoder(3)
    states = np.random.default_rng(30).normal(scale=0.1, size=(4, 7, 6))
    sizes = np.array([1, 3, 7, 5])
    z = enc(torch.from_numpy(tr.observed_subset(states, sizes)))
    for e, k in enumerate(sizes):
        torch.testing.assert_close(z[e], enc(torch.from_numpy(states[e, :k])), rtol=0, atol=1e-14)


def test_subset_sizes_cover_one_to_n():
    sizes = tr.subset_sizes(np.random.default_rng(31), 20_000, 10)
    assert sizes.min() == 1 and sizes.max() == 10
    # Log-uniform: each doubling of the size range holds a similar share.
    assert np.mean(sizes == 1) > np.mean(sizes >= 6)


def test_subset_rollout_keeps_full_set_reward():
    policy = SetPolicy(np.random.default_rng(32), encoder=frozen_encoder())
    env = CatchingEnv(3, 5, np.random.default_rng(33))
    buf = tr.rollout(policy, env, np.random.default_rng(34), obs_sizes=np.array([1, 2, 5]))
    sa, ca, beta = buf.tilts[..., 0], buf.tilts[..., 1], buf.tilts[..., 2]
    normal = np.stack([sa * np.sin(beta), -ca * np.sin(beta), np.cos(beta)], -1)
    env2 = CatchingEnv(3, 5, np.random.default_rng(33))
    env2.reset()
    np.testing.assert_allclose(buf.rewards[0], average_reward(env2.true_states(), normal[0]), atol=1e-12)


def test_single_instance_rollout_is_plain_ppo_collection():
    policy = SetPolicy(np.random.default_rng(12), encoder=frozen_encoder())
    env = CatchingEnv(3, 1, np.random.default_rng(13))
    buf = tr.rollout(policy, env, np.random.default_rng(14))
    assert buf.latents.shape == (20, 3, 64)
    assert buf.success.shape == (3,)


def test_training_is_deterministic_given_seed():
    cfg = tr.TrainConfig(n_envs=4, dris_size=3, epochs=2, minibatch=32, seed=5)
    a = tr.Trainer(cfg, encoder=frozen_encoder())
    b = tr.Trainer(cfg, encoder=frozen_encoder())
    assert a.run() == b.run()
    for x, y in zip(a.policy.parameters(), b.policy.parameters()):
        assert torch.equal(x, y)


def test_resume_continues_bit_exactly(tmp_path):
    cfg = tr.TrainConfig(n_envs=4, dris_size=3, epochs=10, minibatch=32, seed=1)
    full = tr.Trainer(cfg, encoder=frozen_encoder())
    full.run()
    part = tr.Trainer(cfg, encoder=frozen_encoder())
    part.run(5)
    tr.save_trainer(part, tmp_path / "t.ckpt")
    resumed = tr.load_trainer(tmp_path / "t.ckpt")
    resumed.run()
    assert resumed.history == full.history
    for x, y in zip(full.policy.state_dict().values(), resumed.policy.state_dict().values()):
        assert torch.equal(x, y)


def test_policy_checkpoint_round_trip(tmp_path):
    trainer = tr.Trainer(tr.TrainConfig(n_envs=2, dris_size=1, train_encoder=True, minibatch=16))
    tr.save_trainer(trainer, tmp_path / "p.ckpt")
    loaded = tr.load_policy(tmp_path / "p.ckpt")
    for (k, x), y in zip(trainer.policy.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(x, y), k


# -- configuration ------------------------------------------------------------------------

def test_e2e_differs_from_dris_in_exactly_two_flags():
    base = tr.TrainConfig(dris_size=10)
    e2e = tr.e2e_config(base)
    diff = {f.name for f in fields(base) if getattr(base, f.name) != getattr(e2e, f.name)}
    assert diff == {"dris_size", "train_encoder"}


def test_n_collapse_differs_only_in_encoder_trainability():
    one = replace(tr.TrainConfig(), dris_size=1)
    diff = {f.name for f in fields(one) if getattr(one, f.name) != getattr(tr.e2e_config(one), f.name)}
    assert diff == {"train_encoder"}


@pytest.mark.parametrize("kw", [{"dris_size": 0}, {"lr": -1.0}, {"clip": 1.5}, {"gamma": 1.0}])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(**kw)


def test_frozen_encoder_required_unless_trainable():
    with pytest.raises(ConfigurationError):
        tr.make_policy(tr.TrainConfig(train_encoder=False), np.random.default_rng(0))


def test_frozen_encoder_is_not_updated():
    enc = frozen_encoder(3)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    trainer = tr.Trainer(tr.TrainConfig(n_envs=4, dris_size=2, minibatch=32), encoder=enc)
    trainer.train_epoch()
    for k, v in trainer.policy.encoder.state_dict().items():
        assert torch.equal(v, before[k])


# -- encoder pretraining ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_dataset():
    return tr.collect_encoder_dataset(np.random.default_rng(20), n_envs=4, episodes=2, n_instances=32)


def test_dataset_shape_and_order(small_dataset):
    assert small_dataset.shape == (4 * 2 * 20, 32, 6)
    # Sample 0 is env 0 at the first step: all instances share the launch state.
    assert np.all(small_dataset[0] == small_dataset[0, 0])


def test_pretraining_loss_decreases(small_dataset):
    _, losses = tr.pretrain_encoder(small_dataset, 10, np.random.default_rng(21), batch_size=16)
    avg = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(avg) < 0)


def test_pretraining_beats_untrained_encoder(small_dataset):
    held = tr.collect_encoder_dataset(np.random.default_rng(22), n_envs=2, episodes=1, n_instances=32)
    untrained = tr.reconstruction_error(AutoEncoder(np.random.default_rng(23), 32), held)
    ae, _ = tr.pretrain_encoder(small_dataset, 40, np.random.default_rng(23), batch_size=16)
    assert tr.reconstruction_error(ae, held) * 10 <= untrained


def test_pretraining_overfits_single_set():
    one = np.repeat(np.random.default_rng(24).normal(scale=0.05, size=(1, 3, 6)), 4, axis=0)
    ae, losses = tr.pretrain_encoder(one, 400, np.random.default_rng(25), lr=3e-3, batch_size=4, subsets=False)
    assert tr.reconstruction_error(ae, one) < 1e-4


def test_pretrained_encoder_is_frozen(small_dataset):
    ae, _ = tr.pretrain_encoder(small_dataset[:16], 1, np.random.default_rng(26))
    assert not any(p.requires_grad for p in ae.encoder.parameters())


def test_pretraining_rejects_empty_dataset():
    with pytest.raises(ValueError):
        tr.pretrain_encoder(np.zeros((0, 5, 6)), 1, np.random.default_rng(0))


# -- baselines --------------------------------------------------------------------------------

def test_veltrack_vertical_fall_faces_up():
    a = tr.veltrack_policy(np.array([0.0, 0.0, 0.1, 0.0, 0.0, -3.0]), impacted=False)
    assert a[4] == 0.0
    np.testing.assert_array_equal(a[:3], 0.0)


def test_veltrack_follows_after_impact():
    a = tr.veltrack_policy(np.array([0.0, 0.0, 0.05, 0.4, 0.0, 1.0]), impacted=True)
    np.testing.assert_allclose(a, [0.02, 0.0, 0.0, 0.0, 0.0], atol=1e-15)


def test_veltrack_tilts_toward_incoming_ball():
    # Ball moving in +x while falling: plate normal should lean back toward -x.
    a = tr.veltrack_policy(np.array([0.0, 0.0, 0.2, 1.0, 0.0, -1.0]), impacted=False)
    n = rodrigues_rotation(a[3], a[4])[:, 2]
    assert n[0] < 0 and abs(n[1]) < 1e-12
    assert a[4] == pytest.approx(math.pi / 4, abs=1e-5)


def test_veltrack_is_stateless_given_flag():
    s = np.random.default_rng(27).normal(size=6)
    np.testing.assert_array_equal(tr.veltrack_policy(s, True), tr.veltrack_policy(s, True))


# -- evaluation --------------------------------------------------------------------------------

def test_evaluation_is_deterministic():
    a = tr.evaluate(tr.VelTrack(), "noise", 1.0, episodes=16, seed=3)
    b = tr.evaluate(tr.VelTrack(), "noise", 1.0, episodes=16, seed=3)
    assert a == b
    assert 0.0 <= a.success <= 1.0
    assert a.success_lo <= a.success <= a.success_hi


def test_ood_scenario_uses_high_restitution(monkeypatch):
    seen = []
    real = tr.CatchingEnv

    def spy(*args, **kw):
        env = real(*args, **kw)
        seen.append(env)
        return env

    monkeypatch.setattr(tr, "CatchingEnv", spy)
    tr.evaluate(tr.VelTrack(), "ood", episodes=8, seed=0)
    e = seen[0].instances.params.restitution
    assert seen[0].n_instances == 1
    assert np.all((e >= 0.7) & (e <= 0.8))
    assert seen[0].ranges == OOD_RANGES != TRAINING_RANGES


@pytest.mark.parametrize("kw", [{"scenario": "wind"}, {"episodes": 0}])
def test_evaluation_rejects_bad_arguments(kw):
    with pytest.raises(ConfigurationError):
        tr.evaluate(tr.VelTrack(), **{"scenario": "noise", "episodes": 4, **kw})


def test_inference_feeds_single_state_through_frozen_encoder():
    policy = SetPolicy(np.random.default_rng(28), encoder=frozen_encoder(29))
    det = tr.DeterministicPolicy(policy)
    det.reset(5)
    states = np.random.default_rng(30).normal(scale=0.1, size=(5, 1, 6))
    tilt = np.tile([0.0, 1.0, 0.0], (5, 1))
    with torch.no_grad():
        expected = policy.actor_critic.action_mean(policy.encoder(torch.from_numpy(states)),
                                                   torch.from_numpy(tilt)).numpy()
    np.testing.assert_array_equal(det.act(states, tilt), expected)


def test_metrics_csv_round_trip(tmp_path):
    res = tr.evaluate(tr.VelTrack(), "exec", episodes=8, seed=1)
    tr.write_metrics(tmp_path / "m.csv", [res])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["policy", "scenario", "level"]
    assert len(lines) == 2


def test_episode_config_passes_through_training():
    ep = EpisodeConfig(horizon=5)
    trainer = tr.Trainer(tr.TrainConfig(n_envs=2, dris_size=2, minibatch=8), encoder=frozen_encoder(), episode=ep)
    trainer.train_epoch()
    assert trainer.env.t == 5
