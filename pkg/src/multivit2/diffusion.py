"""DDPM-style diffusion over autoencoder latents (epsilon-parameterized, fixed variance)."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NonFiniteError, ShapeError
from .optim import AdamW


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    kind: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ConfigError("schedule needs at least one timestep")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ConfigError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end, "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(d["kind"], d["beta_start"], d["beta_end"], d["T"])


def make_schedule(kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02, T: int = 1000) -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T), kind, float(beta_start), float(beta_end))


def scaled_linear_schedule(T: int = 50) -> NoiseSchedule:
    """Linear schedule whose total noise matches the 1e-4..0.02 / 1000-step convention."""
    scale = 1000.0 / T
    return make_schedule("linear", min(1e-4 * scale, 0.999), min(0.02 * scale, 0.999), T)


def _check_t(t, T: int) -> None:
    ts = t if isinstance(t, (int, np.integer)) else torch.as_tensor(t)
    lo, hi = (ts, ts) if isinstance(ts, (int, np.integer)) else (int(ts.min()), int(ts.max()))
    if lo < 1 or hi > T:
        raise ConfigError(f"timestep out of range 1..{T}: {t}")


def forward_step(z_prev, beta_t: float, noise):
    """One forward kernel step: sqrt(1 - beta) * z + sqrt(beta) * noise."""
    if tuple(noise.shape) != tuple(z_prev.shape):
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z_prev.shape)}")
    if not 0 <= beta_t <= 1:
        raise ConfigError(f"beta_t must lie in [0, 1], got {beta_t}")
    return math.sqrt(1.0 - beta_t) * z_prev + math.sqrt(beta_t) * noise


def forward_marginal(z0, t, schedule: NoiseSchedule, noise):
    """Closed-form q(z_t | z_0); ``t`` is an int or a per-sample integer tensor."""
    if tuple(noise.shape) != tuple(z0.shape):
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    _check_t(t, schedule.T)
    if isinstance(t, (int, np.integer)):
        ab = schedule.alpha_bar(int(t))
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise
    ab = torch.as_tensor(schedule.alpha_bars, dtype=z0.dtype)[torch.as_tensor(t) - 1]
    ab = ab.reshape(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise


def sinusoidal_table(T: int, dim: int) -> torch.Tensor:
    """Row ``t - 1`` embeds timestep ``t``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    steps = torch.arange(1, T + 1, dtype=torch.float64)[:, None]
    table = torch.cat([torch.sin(steps * freqs), torch.cos(steps * freqs)], dim=1)
    if dim % 2:
        table = F.pad(table, (0, 1))
    return table.float()


class Denoiser(nn.Module):
    """Two-level conv net predicting the added noise, conditioned on the timestep."""

    def __init__(self, latent_channels: int = 4, width: int = 32, T: int = 50, emb_dim: int = 32):
        super().__init__()
        self.config = {"latent_channels": latent_channels, "width": width, "T": T, "emb_dim": emb_dim}
        self.register_buffer("time_table", sinusoidal_table(T, emb_dim))
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, width), nn.SiLU(), nn.Linear(width, 3 * width))
        self.inp = nn.Conv3d(latent_channels, width, 3, padding=1)
        self.down = nn.Conv3d(width, 2 * width, 3, stride=2, padding=1)
        self.mid = nn.Conv3d(2 * width, 2 * width, 3, padding=1)
        self.up = nn.Conv3d(3 * width, width, 3, padding=1)
        self.out = nn.Conv3d(width, latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if len(t) == 1 and z.shape[0] != 1:
            t = t.expand(z.shape[0])
        _check_t(t, self.time_table.shape[0])
        w = self.config["width"]
        emb = self.time_mlp(self.time_table[t - 1])[..., None, None, None]
        h = F.silu(self.inp(z) + emb[:, :w])
        d = F.silu(self.down(h) + emb[:, w:])
        d = F.silu(self.mid(d))
        u = F.interpolate(d, size=h.shape[2:], mode="trilinear", align_corners=False)
        u = F.silu(self.up(torch.cat([u, h], dim=1)))
        return self.out(u)


def predict_noise(z_t: torch.Tensor, t, model: Denoiser) -> torch.Tensor:
    eps = model(z_t, t)
    if not torch.isfinite(eps).all():
        raise NonFiniteError(f"non-finite noise prediction at t={t}")
    return eps


def denoise_step(z_t: torch.Tensor, t: int, model: Denoiser, schedule: NoiseSchedule, noise: torch.Tensor | None):
    """Ancestral reverse step with Sigma = beta_t * I; noise-free at t = 1."""
    _check_t(t, schedule.T)
    eps = predict_noise(z_t, t, model)
    beta, alpha, ab = schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t)
    mean = (z_t - (beta / math.sqrt(1.0 - ab)) * eps) / math.sqrt(alpha)
    if t == 1:
        return mean
    return mean + math.sqrt(beta) * noise


@torch.no_grad()
def sample(model: Denoiser, schedule: NoiseSchedule, shape, seed) -> torch.Tensor:
    """Run the reverse chain from z_T ~ N(0, I); ``shape`` includes the batch axis.

    ``seed`` is one int for the whole batch, or one int per batch element
    (independent chains whose draws do not depend on the batch size).
    """
    shape = tuple(shape)
    dtype = next(model.parameters()).dtype
    if isinstance(seed, (list, tuple)):
        if len(seed) != shape[0]:
            raise ShapeError(f"{len(seed)} seeds for a batch of {shape[0]}")
        gens = [torch.Generator().manual_seed(int(s)) for s in seed]

        def draw():
            return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in gens])
    else:
        gen = torch.Generator().manual_seed(int(seed))

        def draw():
            return torch.randn(shape, generator=gen, dtype=dtype)
    z = draw()
    for t in range(schedule.T, 0, -1):
        noise = draw() if t > 1 else None
        z = denoise_step(z, t, model, schedule, noise)
        if not torch.isfinite(z).all():
            raise NonFiniteError(f"sampler produced non-finite latents at timestep {t}")
    return z


def diffusion_train_loss(model: Denoiser, z0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule):
    if noise.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    z_t = forward_marginal(z0, t, schedule, noise)
    return ((noise - model(z_t, t)) ** 2).mean()


@dataclass(frozen=True)
class DiffusionHyper:
    steps: int = 400
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.0


def train_denoiser(corpus: torch.Tensor, model: Denoiser, schedule: NoiseSchedule,
                   hyper: DiffusionHyper = DiffusionHyper(), seed: int = 0):
    """Train a copy of ``model`` on epsilon-matching; returns ``(model, per-step losses)``."""
    corpus = torch.as_tensor(corpus, dtype=torch.float32)
    if len(corpus) == 0:
        raise ConfigError("latent corpus is empty")
    model = copy.deepcopy(model)
    if hyper.steps == 0:
        return model, []
    gen = torch.Generator().manual_seed(seed)
    opt = AdamW(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    curve = []
    model.train()
    for step in range(hyper.steps):
        idx = torch.randint(0, len(corpus), (min(hyper.batch_size, len(corpus)),), generator=gen)
        z0 = corpus[idx]
        t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
        noise = torch.randn(z0.shape, generator=gen)
        loss = diffusion_train_loss(model, z0, t, noise, schedule)
        if not math.isfinite(loss.item()):
            raise NonFiniteError(f"denoiser loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
    model.eval()
    return model, curve
