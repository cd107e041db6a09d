"""Set encoder/decoder, Chamfer loss, FiLM-conditioned actor-critic.

Everything runs in float64. Weights are initialized from a numpy Generator so
that a run is fully determined by its seed.
"""

from __future__ import annotations

import math
from collections.abc import Mapping

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
LATENT_DIM = 64
STATE_DIM = 6
TILT_DIM = 3
ACTION_DIM = 5
# Fixed input normalization: meters for displacement, m/s for velocity.
# Encoder inputs pass through asinh(s / scale): linear within a few centimeters
# (or decimeters per second) of the plate, logarithmic for escaped balls.
STATE_SCALE = (0.05, 0.05, 0.05, 0.5, 0.5, 0.5)
# Saturated sigmoid still stays inside the half-open tilt interval.
BETA_SCALE = math.pi / 4 - 1e-6


class TrainingFault(RuntimeError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def linear(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0, bias: float = 0.0) -> nn.Linear:
    """Dense layer with Glorot-uniform weights drawn from ``rng``."""
    layer = nn.Linear(n_in, n_out, dtype=DTYPE)
    limit = gain * math.sqrt(6.0 / (n_in + n_out))
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(rng.uniform(-limit, limit, size=(n_out, n_in))))
        layer.bias.fill_(bias)
    return layer


def mlp_forward(layers, x, final_activation: bool):
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < last or final_activation:
            x = torch.tanh(x)
    return x


class SetEncoder(nn.Module):
    """Shared per-element tanh stack followed by a feature-wise max over the set."""

    def __init__(self, rng: np.random.Generator, sizes=(STATE_DIM, 64, 128, LATENT_DIM)):
        super().__init__()
        self.register_buffer("input_scale", torch.tensor(STATE_SCALE, dtype=DTYPE))
        self.layers = nn.ModuleList(linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def normalize(self, states: torch.Tensor) -> torch.Tensor:
        return torch.asinh(states / self.input_scale)

    def per_element(self, states: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.layers, self.normalize(states), final_activation=True)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        if states.shape[-2] == 0:
            raise ValueError("cannot encode an empty set")
        return self.per_element(states).max(dim=-2).values


class SetDecoder(nn.Module):
    """Latent vector to M elements in the encoder's normalized coordinates."""

    def __init__(self, rng: np.random.Generator, n_out: int, latent: int = LATENT_DIM, hidden: int = 256):
        super().__init__()
        self.n_out = n_out
        self.layers = nn.ModuleList([linear(rng, latent, hidden), linear(rng, hidden, n_out * STATE_DIM)])

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = mlp_forward(self.layers, z, final_activation=False)
        return out.reshape(*z.shape[:-1], self.n_out, STATE_DIM)


def chamfer_loss(a: torch.Tensor, b: torch.Tensor, expanded: bool = False) -> torch.Tensor:
    """Symmetric mean squared nearest-neighbour distance between point sets.

    ``a`` is (..., n, d) and ``b`` is (..., m, d); returns shape (...).
    ``expanded`` uses |a|^2 + |b|^2 - 2ab, several times faster for training
    but subject to cancellation error for nearly coincident points.
    """
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("chamfer loss needs non-empty sets")
    if expanded:
        d2 = (a * a).sum(-1)[..., :, None] + (b * b).sum(-1)[..., None, :] - 2 * a @ b.transpose(-1, -2)
        d2 = d2.clamp_min(0.0)
    else:
        d2 = ((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(-1)
    return d2.min(dim=-1).values.mean(-1) + d2.min(dim=-2).values.mean(-1)


class AutoEncoder(nn.Module):
    def __init__(self, rng: np.random.Generator, n_out: int):
        super().__init__()
        self.encoder = SetEncoder(rng)
        self.decoder = SetDecoder(rng, n_out)

    def reconstruction_loss(self, states: torch.Tensor, expanded: bool = False) -> torch.Tensor:
        target = self.encoder.normalize(states)
        return chamfer_loss(target, self.decoder(self.encoder(states)), expanded)


class FiLM(nn.Module):
    """Feature-wise affine modulation of the latent by the plate tilt.

    Output layers start at zero weight with scale bias 1 and shift bias 0,
    so an untrained module is the identity on ``z``.
    """

    def __init__(self, rng: np.random.Generator, cond: int = TILT_DIM, hidden: int = 32, latent: int = LATENT_DIM):
        super().__init__()
        self.scale = nn.ModuleList([linear(rng, cond, hidden), linear(rng, hidden, latent, gain=0.0, bias=1.0)])
        self.shift = nn.ModuleList([linear(rng, cond, hidden), linear(rng, hidden, latent, gain=0.0)])

    def forward(self, z: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        lam = mlp_forward(self.scale, u, final_activation=False)
        mu = mlp_forward(self.shift, u, final_activation=False)
        return lam * z + mu


def wrap_angle(x: torch.Tensor) -> torch.Tensor:
    return torch.remainder(x + math.pi, 2 * math.pi) - math.pi


class ActorCritic(nn.Module):
    """FiLM-conditioned Gaussian policy and value head over a set latent.

    The policy mean is squashed onto the action box: tanh-scaled translation,
    an angle from a (sin, cos) pair, and a sigmoid-scaled tilt. The log-std is
    a free state-independent vector.
    """

    def __init__(self, rng: np.random.Generator, delta_max: float = 0.15,
                 init_std=(0.05, 0.05, 0.05, 0.5, 0.1), hidden: int = 128):
        super().__init__()
        self.delta_max = delta_max
        self.film = FiLM(rng)
        self.trunk = nn.ModuleList([linear(rng, LATENT_DIM, hidden), linear(rng, hidden, hidden)])
        self.head = linear(rng, hidden, 6, gain=0.01)
        with torch.no_grad():
            # alpha head starts at (sin, cos) = (0, 1); tilt starts nearly flat.
            self.head.bias.copy_(torch.tensor([0.0, 0.0, 0.0, 0.0, 1.0, -3.0], dtype=DTYPE))
        self.log_std = nn.Parameter(torch.log(torch.tensor(init_std, dtype=DTYPE)))
        self.value_layers = nn.ModuleList([linear(rng, LATENT_DIM, hidden), linear(rng, hidden, 1, gain=0.0)])

    def action_mean(self, z: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        h = mlp_forward(self.trunk, self.film(z, u), final_activation=True)
        raw = self.head(h)
        delta = self.delta_max * torch.tanh(raw[..., :3])
        alpha = torch.atan2(raw[..., 3], raw[..., 4])
        beta = BETA_SCALE * torch.sigmoid(raw[..., 5])
        return torch.cat([delta, alpha[..., None], beta[..., None]], -1)

    def value(self, z: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.value_layers, self.film(z, u), final_activation=False)[..., 0]

    def log_prob(self, action: torch.Tensor, mean: torch.Tensor) -> torch.Tensor:
        return gaussian_log_prob(action, mean, self.log_std)

    def entropy(self) -> torch.Tensor:
        return (0.5 + 0.5 * math.log(2 * math.pi) + self.log_std).sum()


def gaussian_log_prob(action: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log-density; the angle coordinate uses the wrapped difference."""
    diff = action - mean
    diff = torch.cat([diff[..., :3], wrap_angle(diff[..., 3:4]), diff[..., 4:]], -1)
    z = diff / torch.exp(log_std)
    return (-0.5 * z**2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)


class SetPolicy(nn.Module):
    """Encoder plus actor-critic. The encoder is frozen unless ``train_encoder``."""

    def __init__(self, rng: np.random.Generator, delta_max: float = 0.15, encoder: SetEncoder | None = None,
                 train_encoder: bool = False):
        super().__init__()
        self.encoder = encoder if encoder is not None else SetEncoder(rng)
        self.actor_critic = ActorCritic(rng, delta_max)
        self.train_encoder = train_encoder
        self.encoder.requires_grad_(train_encoder)

    def encode(self, states: torch.Tensor) -> torch.Tensor:
        if self.train_encoder:
            return self.encoder(states)
        with torch.no_grad():
            return self.encoder(states)

    def trainable(self) -> dict[str, torch.Tensor]:
        return {k: p for k, p in self.named_parameters() if p.requires_grad}


# -- functional surface ------------------------------------------------------

def set_encode(states, encoder: SetEncoder) -> torch.Tensor:
    return encoder(as_tensor(states))


def set_decode(z, decoder: SetDecoder) -> torch.Tensor:
    return decoder(as_tensor(z))


def film_modulate(z, u, film: FiLM) -> torch.Tensor:
    return film(as_tensor(z), as_tensor(u))


def policy_forward(z, u, model: ActorCritic):
    """(mean, log_std) of the action distribution."""
    return model.action_mean(as_tensor(z), as_tensor(u)), model.log_std


def value_forward(z, u, model: ActorCritic) -> torch.Tensor:
    return model.value(as_tensor(z), as_tensor(u))


def compute_gradients(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss for every named tensor (zeros where unused)."""
    if loss.ndim != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise TrainingFault("non-finite loss")
    names = list(params)
    tensors = [params[n] for n in names]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=True)
    else:
        grads = [None] * len(tensors)
    out = {}
    for name, t, g in zip(names, tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise TrainingFault(f"non-finite gradient for {name}")
        out[name] = g
    return out


def gradient_check(loss_fn, params: Mapping[str, torch.Tensor], rng: np.random.Generator, coords: int = 20,
                   step: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences.

    ``coords`` random scalar coordinates are probed across all tensors.
    Relative error is |g - fd| / max(|g|, |fd|), with gradients below 1e-9 in
    both estimates treated as agreeing.
    """
    names = list(params)
    grads = compute_gradients(loss_fn(), params)
    sizes = np.array([params[n].numel() for n in names])
    worst = 0.0
    for _ in range(coords):
        k = int(rng.choice(len(names), p=sizes / sizes.sum()))
        t = params[names[k]]
        flat = int(rng.integers(t.numel()))
        with torch.no_grad():
            view = t.view(-1)
            orig = view[flat].item()
            view[flat] = orig + step
            up = loss_fn().item()
            view[flat] = orig - step
            down = loss_fn().item()
            view[flat] = orig
        fd = (up - down) / (2 * step)
        g = grads[names[k]].reshape(-1)[flat].item()
        scale = max(abs(g), abs(fd))
        if scale > 1e-9:
            worst = max(worst, abs(g - fd) / scale)
    return worst
