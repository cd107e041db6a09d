"""Empirical checks of the instance-set theory.

Particle exactness, the gradient-variance law, asymptotic unmasking on a toy
quadratic, empirical Rademacher complexity and an IPM estimate between
physics distributions. Every estimator reports an uncertainty alongside its
point value.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.func import functional_call, grad, vmap

from .dris import ESCAPE_BOUND, init_dris, propagate
from .env import CatchingEnv, PhysicsConfig, random_actions
from .networks import SetPolicy, gaussian_log_prob
from .physics import TRAINING_RANGES, ConfigurationError, ParamRanges, replay_balls
from .task import EpisodeConfig, apply_action, init_episode
from .training import DeterministicPolicy, bootstrap_ci

log = logging.getLogger(__name__)


# -- particle exactness -------------------------------------------------------------------

def check_particle_exactness(actions, n: int, seed: int = 0, episode: EpisodeConfig = EpisodeConfig(),
                             physics_cfg: PhysicsConfig = PhysicsConfig()) -> float:
    """Max |ensemble - solo replay| over all instances, steps and state entries.

    ``actions`` is (T, 5) for one episode or (S, T, 5) for S independent
    episodes run side by side. Each instance is replayed without its
    siblings against the recorded plate trajectory, under the same escape
    guard, and compared bit for bit; any mismatch in freezing returns inf.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 2:
        actions = actions[None]
    n_seq = actions.shape[0]
    rng = np.random.default_rng(seed)
    start = init_episode(rng, episode, n_seq)
    iset = init_dris(start.ball, n, rng)
    plate = start.plate
    gains = physics_cfg.gains()
    solo = [iset.state[:, i] for i in range(n)]
    solo_frozen = np.zeros((n_seq, n), dtype=bool)
    worst = 0.0
    for t in range(actions.shape[1]):
        pos, rot = apply_action(actions[:, t], start.frame, plate.center, episode.delta_max)
        iset, plate, traj = propagate(iset, plate, pos, rot, gains, episode.control_dt, physics_cfg.substeps,
                                      frame=start.frame, record=True, bounce_threshold=physics_cfg.bounce_threshold)
        for i in range(n):
            moved = replay_balls(solo[i], iset.params[:, i], traj, physics_cfg.bounce_threshold)
            keep = solo_frozen[:, i, None]
            solo[i] = type(moved)(np.where(keep, solo[i].position, moved.position),
                                  np.where(keep, solo[i].velocity, moved.velocity))
            rel = solo[i].position - start.frame.origin
            solo_frozen[:, i] |= np.any(np.abs(rel) > ESCAPE_BOUND, axis=-1)
            dev = max(np.max(np.abs(solo[i].position - iset.state.position[:, i])),
                      np.max(np.abs(solo[i].velocity - iset.state.velocity[:, i])))
            worst = max(worst, float(dev))
        if np.any(solo_frozen != iset.frozen):
            return math.inf
    return worst


def random_action_sequences(rng: np.random.Generator, count: int, horizon: int = 20,
                            delta_max: float = 0.15) -> np.ndarray:
    return np.stack([random_actions(rng, horizon, delta_max) for _ in range(count)])


# -- variance law ---------------------------------------------------------------------------

@dataclass
class VarianceCurve:
    points: list  # (N, total variance, ci_lo, ci_hi)
    sigma2: float = math.nan
    rho: float = math.nan
    residual: float = math.nan
    fitted: bool = False
    notes: list = field(default_factory=list)

    def variance(self, n: int) -> float:
        for p in self.points:
            if p[0] == n:
                return p[1]
        raise KeyError(n)


def fit_variance_model(points) -> tuple[float, float, float]:
    """Least-squares fit of V(N) = s2 * rho + s2 * (1 - rho) / N.

    ``points`` holds (N, V) pairs with at least three distinct N. Returns
    ``(sigma2, rho, residual)`` where residual is the sum of squared errors.
    """
    pts = [(float(p[0]), float(p[1])) for p in points]
    ns = np.array([p[0] for p in pts])
    if len(np.unique(ns)) < 3:
        raise ValueError("variance fit needs at least three distinct N values")
    if np.any(ns < 1):
        raise ValueError("N values must be >= 1")
    v = np.array([p[1] for p in pts])
    A = np.stack([np.ones_like(ns), 1.0 / ns], 1)
    (a, b), *_ = np.linalg.lstsq(A, v, rcond=None)
    residual = float(np.sum((A @ np.array([a, b]) - v) ** 2))
    sigma2 = float(a + b)
    if sigma2 <= 0:
        warnings.warn("non-positive fitted sigma^2; rho undefined", RuntimeWarning)
        return sigma2, math.nan, residual
    rho = float(a / sigma2)
    n_max = ns.max()
    lo = -1.0 / (n_max - 1) if n_max > 1 else -math.inf
    if not lo <= rho <= 1.0:
        warnings.warn(f"fitted rho {rho:.4f} outside [{lo:.4f}, 1]; clipped", RuntimeWarning)
        rho = float(np.clip(rho, lo, 1.0))
    return sigma2, rho, residual


def total_variance(samples: np.ndarray) -> float:
    """Trace of the empirical covariance of row vectors."""
    return float(np.var(samples, axis=0, ddof=1).sum())


def _variance_point(n: int, grads: np.ndarray, rng: np.random.Generator, resamples: int = 500):
    v = total_variance(grads)
    idx = rng.integers(0, len(grads), size=(resamples, len(grads)))
    boots = np.array([total_variance(grads[i]) for i in idx])
    lo, hi = np.quantile(boots, [0.025, 0.975])
    return (n, v, float(min(lo, v)), float(max(hi, v)))


def synthetic_gradients(rng: np.random.Generator, n: int, repetitions: int, sigma2: float, rho: float,
                        dim: int = 8) -> np.ndarray:
    """Instance-averaged synthetic gradients with per-instance trace ``sigma2``
    and pairwise correlation ``rho``. Shape (repetitions, dim)."""
    if not 0 <= rho <= 1:
        raise ValueError("synthetic rho must be in [0, 1]")
    scale = math.sqrt(sigma2 / dim)
    common = rng.standard_normal((repetitions, 1, dim))
    own = rng.standard_normal((repetitions, n, dim))
    g = scale * (math.sqrt(rho) * common + math.sqrt(1 - rho) * own)
    return g.mean(axis=1)


def synthetic_variance_curve(sigma2: float, rho: float, n_list, repetitions: int, seed: int = 0,
                             dim: int = 8) -> VarianceCurve:
    rng = np.random.default_rng(seed)
    pts = [_variance_point(n, synthetic_gradients(rng, n, repetitions, sigma2, rho, dim), rng) for n in n_list]
    return _finish_curve(pts)


def _finish_curve(points) -> VarianceCurve:
    curve = VarianceCurve(points)
    values = np.array([p[1] for p in points])
    if np.allclose(values, 0.0):
        warnings.warn("degenerate gradients (zero variance); rho fit skipped", RuntimeWarning)
        curve.notes.append("degenerate: fit skipped")
        return curve
    if len({p[0] for p in points}) >= 3:
        curve.sigma2, curve.rho, curve.residual = fit_variance_model([(p[0], p[1]) for p in points])
        curve.fitted = True
    return curve


def _actor_params(policy: SetPolicy) -> dict:
    ac = policy.actor_critic
    keep = ("film.", "trunk.", "head.", "log_std")
    return {k: v.detach() for k, v in ac.named_parameters() if k.startswith(keep)}


def estimate_gradient_variance(policy: SetPolicy, n_list, repetitions: int = 256, seed: int = 0,
                               episode: EpisodeConfig = EpisodeConfig(),
                               physics_cfg: PhysicsConfig = PhysicsConfig(), gamma: float = 0.95,
                               ranges: ParamRanges = TRAINING_RANGES,
                               resample_actions: bool = False) -> VarianceCurve:
    """Score-function gradient variance of the instance-averaged return.

    For each N, ``repetitions`` episodes start from one fixed initial state
    and draw fresh physics parameters. Exploration noise is shared across
    repetitions unless ``resample_actions`` is set, so the spread measures
    the physics sampling that instance averaging targets. The per-episode
    estimator is sum_t grad log pi(a_t) times the instance-mean discounted
    return minus its mean over repetitions. Only actor parameters are
    differentiated.
    """
    rng = np.random.default_rng(seed)
    start = init_episode(np.random.default_rng(seed + 1), episode, 1)
    ac = policy.actor_critic
    params = _actor_params(policy)
    others = {k: v.detach() for k, v in ac.named_parameters() if k not in params}
    points = []
    for n in n_list:
        env = CatchingEnv(repetitions, n, rng, episode, physics_cfg, ranges).reset(_tile_start(start, repetitions))
        zs, us, acts = [], [], []
        returns = np.zeros((repetitions, n))
        std = torch.exp(ac.log_std).detach().numpy()
        noise = np.random.default_rng(seed + 2).standard_normal((episode.horizon, 5))
        for t in range(episode.horizon):
            s = torch.from_numpy(env.true_states())
            u = torch.from_numpy(env.tilt())
            with torch.no_grad():
                z = policy.encoder(s)
                mean = ac.action_mean(z, u)
            eps = rng.standard_normal((repetitions, 5)) if resample_actions else noise[t]
            a = mean.numpy() + std * eps
            returns += gamma**t * env.instance_rewards()
            env.step(a)
            zs.append(z)
            us.append(u)
            acts.append(torch.from_numpy(a))
        z = torch.stack(zs, 1)
        u = torch.stack(us, 1)
        a = torch.stack(acts, 1)

        mean_only = _MeanOnly(ac)

        def logp_sum(p, z1, u1, a1):
            full = {**others, **p}
            mean = functional_call(mean_only, {f"ac.{k}": v for k, v in full.items()}, (z1, u1))
            return gaussian_log_prob(a1, mean, full["log_std"]).sum()

        per = vmap(grad(logp_sum), in_dims=(None, 0, 0, 0))(params, z, u, a)
        flat = torch.cat([per[k].reshape(repetitions, -1) for k in params], 1).numpy()
        avg = returns.mean(axis=1, keepdims=True)
        g = flat * (avg - avg.mean())
        points.append(_variance_point(n, g, rng))
        log.info("variance N=%d: %.4g", n, points[-1][1])
    return _finish_curve(points)


def _tile_start(start, k: int):
    rep = lambda a: np.repeat(np.asarray(a), k, axis=0)  # noqa: E731
    p, f, b = start.plate, start.frame, start.ball
    return type(start)(type(b)(rep(b.position), rep(b.velocity)),
                       type(p)(rep(p.center), rep(p.orientation), rep(p.linear_velocity), rep(p.angular_velocity),
                               p.half_length),
                       type(f)(rep(f.origin), rep(f.yaw)), rep(start.arrival), rep(start.flight_time),
                       rep(start.lead_time))


class _MeanOnly(torch.nn.Module):
    def __init__(self, ac):
        super().__init__()
        self.ac = ac

    def forward(self, z, u):
        return self.ac.action_mean(z, u)


# -- asymptotic unmasking ---------------------------------------------------------------------

@dataclass
class UnmaskingRow:
    n: int
    mean: float
    stderr: float
    limit: float
    gap: float
    noise_std: float


def unmasking_convergence(c_mu: float, g, H, Sigma, n_list, draws: int = 2000, seed: int = 0):
    """Instance-averaged toy quadratic cost versus its large-N limit.

    Per-instance cost C(s) = c_mu + g.(s - mu) + 0.5 (s - mu)' H (s - mu) with
    s ~ N(mu, Sigma). Returns ``(rows, slope)`` where ``slope`` is the log-log
    regression slope of the linear noise term's standard deviation against N.
    """
    g = np.asarray(g, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    if not np.allclose(H, H.T) or np.linalg.eigvalsh(H).min() < -1e-12:
        raise ConfigurationError("H must be symmetric positive semidefinite")
    w, V = np.linalg.eigh(Sigma)
    if w.min() < -1e-12:
        raise ConfigurationError("Sigma must be positive semidefinite")
    root = V * np.sqrt(np.clip(w, 0.0, None))
    limit = c_mu + 0.5 * float(np.trace(H @ Sigma))
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_list:
        delta = rng.standard_normal((draws, n, len(g))) @ root.T
        quad = 0.5 * np.einsum("dni,ij,dnj->dn", delta, H, delta).mean(1)
        linear = delta.mean(1) @ g
        J = c_mu + linear + quad
        se = float(J.std(ddof=1) / math.sqrt(draws))
        rows.append(UnmaskingRow(int(n), float(J.mean()), se, limit, float(abs(J.mean() - limit)),
                                 float(linear.std(ddof=1))))
    ns = np.array([r.n for r in rows], dtype=np.float64)
    noise = np.array([r.noise_std for r in rows])
    slope = float(np.polyfit(np.log(ns), np.log(noise), 1)[0]) if np.all(noise > 0) and len(ns) > 1 else math.nan
    return rows, slope


# -- sim-to-real bound quantities --------------------------------------------------------------

@dataclass
class CostTable:
    matrix: np.ndarray
    bound: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.size == 0:
            raise ValueError("cost table must be a non-empty 2-D array")
        if np.any(np.abs(self.matrix) > self.bound + 1e-9):
            raise ValueError("cost outside [-B, B]")


def empirical_rademacher(costs: CostTable, draws: int = 2000, seed: int = 0, exhaustive: bool = False):
    """E_sigma sup_theta (1/N) sum_i sigma_i L(theta, c_i) with a 95% CI.

    With ``exhaustive`` all 2^N sign vectors are enumerated (small N only) and
    the result is exact, so the interval collapses to the point.
    """
    L = costs.matrix
    n = L.shape[1]
    if exhaustive:
        if n > 20:
            raise ValueError("exhaustive enumeration limited to N <= 20")
        signs = np.array(list(itertools.product([-1.0, 1.0], repeat=n)))
        sups = (signs @ L.T / n).max(axis=1)
        m = float(sups.mean())
        return m, m, m
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(draws, n))
    sups = (signs @ L.T / n).max(axis=1)
    m = float(sups.mean())
    half = 1.96 * float(sups.std(ddof=1)) / math.sqrt(draws)
    return m, m - half, m + half


def episode_costs(policy, episodes: int, seed: int, ranges: ParamRanges = TRAINING_RANGES,
                  episode: EpisodeConfig = EpisodeConfig(), physics_cfg: PhysicsConfig = PhysicsConfig(),
                  gamma: float = 0.95) -> np.ndarray:
    """Negative discounted single-ball returns. Episode starts depend only on
    ``seed``, so different policies and ranges share initial states."""
    if isinstance(policy, SetPolicy):
        policy = DeterministicPolicy(policy)
    seeds = np.random.SeedSequence(seed).spawn(2)
    start_rng, param_rng = (np.random.default_rng(s) for s in seeds)
    env = CatchingEnv(episodes, 1, start_rng, episode, physics_cfg, ranges)
    env.reset(init_episode(start_rng, episode, episodes), param_rng)
    policy.reset(episodes)
    ret = np.zeros(episodes)
    for t in range(episode.horizon):
        action = policy.act(env.true_states(), env.tilt())
        r, _ = env.step(action)
        ret += gamma**t * r
    return -ret


def cost_bound(gamma: float = 0.95, r_max: float = 1.0) -> float:
    """|L| <= r_max / (1 - gamma) for per-step rewards bounded by r_max."""
    return r_max / (1 - gamma)


def cost_table(policies, n_samples: int, seed: int = 0, ranges: ParamRanges = TRAINING_RANGES,
               gamma: float = 0.95, **kw) -> CostTable:
    policies = list(policies)
    if not policies:
        raise ValueError("empty policy grid")
    rows = [episode_costs(p, n_samples, seed, ranges, gamma=gamma, **kw) for p in policies]
    return CostTable(np.stack(rows), cost_bound(gamma))


def estimate_ipm(policies, source: ParamRanges, target: ParamRanges, samples: int = 256, seed: int = 0,
                 resamples: int = 1000, gamma: float = 0.95, **kw):
    """sup over the policy grid of |mean target cost - mean source cost|.

    Source and target rollouts share episode starts and the uniform draws
    behind the physics parameters, so each episode gives a paired cost
    difference; the CI bootstraps those pairs. Returns
    ``(estimate, ci_lo, ci_hi, per_policy_gaps)``.
    """
    policies = list(policies)
    if not policies:
        raise ValueError("empty policy grid")
    src = np.stack([episode_costs(p, samples, seed, source, gamma=gamma, **kw) for p in policies])
    tgt = np.stack([episode_costs(p, samples, seed, target, gamma=gamma, **kw) for p in policies])
    diff = tgt - src
    gaps = np.abs(diff.mean(1))
    est = float(gaps.max())
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, samples, size=(resamples, samples))
    boots = np.abs(diff[:, idx].mean(-1)).max(0)
    lo, hi = np.quantile(boots, [0.025, 0.975])
    return est, float(min(lo, est)), float(max(hi, est)), gaps
