"""KL-regularized 3D convolutional autoencoder and its loss family."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import load_checkpoint, save_checkpoint
from .data import DatasetManifest, StructuralVolume
from .errors import ConfigError, NonFiniteError, ShapeError
from .optim import AdamW

log = logging.getLogger(__name__)


def _halve(n: int) -> int:
    # output size of a k=3, stride=2, pad=1 convolution
    return (n - 1) // 2 + 1


@dataclass(frozen=True)
class AEDescriptor:
    in_dims: tuple[int, int, int] = (24, 28, 24)
    channels: tuple[int, ...] = (16, 32)
    latent_channels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "in_dims", tuple(int(d) for d in self.in_dims))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.in_dims) != 3 or min(self.in_dims) < 1:
            raise ConfigError(f"in_dims must be 3 positive ints, got {self.in_dims}")
        if not self.channels or self.latent_channels < 1:
            raise ConfigError("need at least one hidden level and one latent channel")
        d = int(np.prod(self.latent_shape))
        if d >= int(np.prod(self.in_dims)):
            raise ConfigError(f"latent size {d} does not compress input size {int(np.prod(self.in_dims))}")

    @property
    def level_dims(self) -> list[tuple[int, int, int]]:
        """Spatial dims after each stride-2 level, input first, latent last."""
        dims = [self.in_dims]
        for _ in range(len(self.channels) + 1):
            dims.append(tuple(_halve(n) for n in dims[-1]))
        return dims

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.latent_channels, *self.level_dims[-1])

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.channels) + 1)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AEDescriptor":
        return cls(tuple(d["in_dims"]), tuple(d["channels"]), int(d["latent_channels"]))


@dataclass
class GaussianPosterior:
    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {tuple(self.mu.shape)} and log_var {tuple(self.log_var.shape)} differ")

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


class KLAutoencoder(nn.Module):
    def __init__(self, descriptor: AEDescriptor | None = None):
        super().__init__()
        self.descriptor = descriptor or AEDescriptor()
        chans = (1, *self.descriptor.channels)
        cz = self.descriptor.latent_channels
        self.enc = nn.ModuleList(
            [nn.Conv3d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(len(chans) - 1)]
            + [nn.Conv3d(chans[-1], 2 * cz, 3, stride=2, padding=1)]
        )
        # mirrored widths, halved once more before the last (full-resolution) upsample
        widths = list(self.descriptor.channels[::-1]) + [max(1, self.descriptor.channels[0] // 2)]
        self.dec_in = nn.Conv3d(cz, widths[0], 3, padding=1)
        self.dec = nn.ModuleList([nn.Conv3d(widths[i], widths[i + 1], 3, padding=1) for i in range(len(widths) - 1)])
        self.dec_out = nn.Conv3d(widths[-1], 1, 3, padding=1)

    def _as_batch(self, x) -> torch.Tensor:
        if isinstance(x, StructuralVolume):
            x = torch.from_numpy(x.voxels)
        if x.dim() == 3:
            x = x[None, None]
        elif x.dim() == 4:
            x = x[:, None]
        if tuple(x.shape[2:]) != self.descriptor.in_dims or x.shape[1] != 1:
            raise ShapeError(f"expected volumes of dims {self.descriptor.in_dims}, got {tuple(x.shape[1:])}")
        return x.to(self.enc[0].weight.dtype)

    def encode(self, x) -> GaussianPosterior:
        h = self._as_batch(x)
        for i, conv in enumerate(self.enc):
            h = conv(h)
            if i < len(self.enc) - 1:
                h = F.silu(h)
            _check_finite(h, f"encoder layer {i}")
        mu, log_var = h.chunk(2, dim=1)
        return GaussianPosterior(mu, log_var.clamp(-30.0, 20.0))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 4
        if squeeze:
            z = z[None]
        if tuple(z.shape[1:]) != self.descriptor.latent_shape:
            raise ShapeError(f"expected latent shape {self.descriptor.latent_shape}, got {tuple(z.shape[1:])}")
        targets = self.descriptor.level_dims[:-1][::-1]  # coarse to fine, ending at the input dims
        h = F.silu(self.dec_in(z))
        for i, conv in enumerate(self.dec):
            h = F.interpolate(h, size=targets[i], mode="trilinear", align_corners=False)
            h = F.silu(conv(h))
            _check_finite(h, f"decoder layer {i}")
        h = F.interpolate(h, size=targets[-1], mode="trilinear", align_corners=False)
        # linear head: a squashing output saturates under MSE and stalls training
        out = self.dec_out(h)
        _check_finite(out, "decoder output")
        return out[0] if squeeze else out

    def forward(self, x, noise: torch.Tensor | None = None):
        post = self.encode(x)
        z = post.mu if noise is None else sample_latent(post, noise)
        return self.decode(z), post


def _check_finite(t: torch.Tensor, where: str) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite activation at {where}")


def sample_latent(p: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != p.mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != posterior shape {tuple(p.mu.shape)}")
    return p.mu + torch.exp(0.5 * p.log_var) * noise


def recon_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ShapeError(f"shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).mean()


def kl_loss(p: GaussianPosterior, batched: bool | None = None) -> torch.Tensor:
    """KL(q || N(0, I)) summed over latent elements; averaged over the batch axis of 5D input."""
    if not (torch.isfinite(p.mu).all() and torch.isfinite(p.log_var).all()):
        raise NonFiniteError("non-finite posterior parameters")
    # expm1 avoids cancellation near log_var = 0; each term is >= 0 exactly, so clamp rounding residue
    terms = (p.mu ** 2 + torch.expm1(p.log_var) - p.log_var).clamp_min(0.0)
    total = 0.5 * terms.sum()
    if batched is None:
        batched = p.mu.dim() == 5
    return total / p.mu.shape[0] if batched else total


def total_loss(l_recon, l_kl, lambda_recon: float = 1.0, lambda_kl: float = 1e-2):
    if lambda_recon < 0 or lambda_kl < 0:
        raise ConfigError("loss weights must be non-negative")
    return lambda_recon * l_recon + lambda_kl * l_kl


@dataclass(frozen=True)
class AEHyper:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.0
    lambda_recon: float = 1.0
    lambda_kl: float = 1e-2


def volumes_tensor(data) -> torch.Tensor:
    """Stack a manifest / list of volumes / array into a (N, 1, D, H, W) float32 tensor."""
    if isinstance(data, DatasetManifest):
        data = [s.volume for s in data.subjects]
    if isinstance(data, torch.Tensor):
        arr = data.float()
    elif isinstance(data, np.ndarray):
        arr = torch.from_numpy(data.astype(np.float32))
    else:
        arr = torch.from_numpy(np.stack([v.voxels for v in data]))
    if arr.dim() == 4:
        arr = arr[:, None]
    return arr


def train_autoencoder(data, model: KLAutoencoder, hyper: AEHyper = AEHyper(), seed: int = 0):
    """Train a copy of ``model``; returns ``(trained_model, curve)``.

    ``curve`` holds one dict per epoch with the mean total/recon/kl loss.
    """
    x_all = volumes_tensor(data)
    if len(x_all) == 0:
        raise ConfigError("cannot train on an empty corpus")
    model = copy.deepcopy(model)
    if hyper.epochs == 0:
        return model, []
    gen = torch.Generator().manual_seed(seed)
    opt = AdamW(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    curve = []
    model.train()
    for epoch in range(hyper.epochs):
        order = torch.randperm(len(x_all), generator=gen)
        sums = np.zeros(3)
        for start in range(0, len(x_all), hyper.batch_size):
            xb = x_all[order[start:start + hyper.batch_size]]
            post = model.encode(xb)
            noise = torch.randn(post.mu.shape, generator=gen)
            x_hat = model.decode(sample_latent(post, noise))
            lr_ = recon_loss(xb, x_hat)
            lk = kl_loss(post)
            loss = total_loss(lr_, lk, hyper.lambda_recon, hyper.lambda_kl)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"autoencoder loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += np.array([loss.item(), lr_.item(), lk.item()]) * len(xb)
        sums /= len(x_all)
        curve.append({"epoch": epoch, "total": sums[0], "recon": sums[1], "kl": sums[2]})
        log.debug("ae epoch %d total %.5f recon %.5f kl %.3f", epoch, *sums)
    model.eval()
    return model, curve


@torch.no_grad()
def reconstruction_mse(model: KLAutoencoder, data) -> float:
    x = volumes_tensor(data)
    x_hat, _ = model(x)
    return float(recon_loss(x, x_hat))


def state_tensors(module: nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.state_dict())


def load_state(module: nn.Module, tensors: dict[str, np.ndarray]) -> nn.Module:
    module.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return module


def save_autoencoder(model: KLAutoencoder, path, extra: dict | None = None):
    return save_checkpoint(path, "autoencoder", model.descriptor.to_dict(), state_tensors(model), extra)


def load_autoencoder(path, stage: str | None = "pretrain-ae"):
    """Return ``(model, header)``; a missing file is reported against ``stage``."""
    desc, tensors, header = load_checkpoint(path, "autoencoder", stage)
    model = load_state(KLAutoencoder(AEDescriptor.from_dict(desc)), tensors)
    model.eval()
    model.requires_grad_(False)
    return model, header
