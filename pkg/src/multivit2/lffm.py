"""Latent feature fusion: sMRI latent from the pretrained encoder, FNC latent on the same grid, conv fusion.

The FNC latent Z' lives on the sMRI latent grid with the depth axis removed;
its content comes from the FNC matrix (bilinear resample + 1x1 lift), then it
is broadcast along depth and fused with Z by a residual 3D convolution.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import KLAutoencoder
from .errors import ConfigError, ShapeError


@torch.no_grad()
def extract_latent(volume, ae: KLAutoencoder) -> torch.Tensor:
    """Deterministic feature extraction: the encoder posterior mean."""
    return ae.encode(volume).mu


def resample_fnc(fnc: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resampling of (B, C, C) matrices to (B, 1, h, w).

    Antialiasing widens the kernel when shrinking, so every FNC entry reaches
    the output instead of only those next to the sample points.
    """
    if min(size) < 1:
        raise ConfigError(f"degenerate FNC latent dims {size}")
    if fnc.dim() == 2:
        fnc = fnc[None]
    return F.interpolate(fnc[:, None], size=tuple(size), mode="bilinear", align_corners=False, antialias=True)


class LFFM(nn.Module):
    def __init__(self, latent_shape: tuple[int, int, int, int]):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        cz = latent_shape[0]
        self.lift = nn.Conv2d(1, cz, 1)
        self.fusion = nn.Conv3d(2 * cz, cz, 3, padding=1)

    @property
    def fnc_latent_shape(self) -> tuple[int, int, int]:
        cz, _, h, w = self.latent_shape
        return (cz, h, w)

    def project_fnc(self, fnc: torch.Tensor) -> torch.Tensor:
        _, _, h, w = self.latent_shape
        return self.lift(resample_fnc(fnc.to(self.lift.weight.dtype), (h, w)))

    def fuse(self, z: torch.Tensor, zp: torch.Tensor) -> torch.Tensor:
        if z.dim() != 5 or zp.dim() != 4:
            raise ShapeError(f"expected Z (B,C,D,H,W) and Z' (B,C,H,W), got {tuple(z.shape)} and {tuple(zp.shape)}")
        if z.shape[:2] != zp.shape[:2] or z.shape[3:] != zp.shape[2:]:
            raise ShapeError(f"Z {tuple(z.shape)} and Z' {tuple(zp.shape)} are not grid-compatible")
        zp_b = zp[:, :, None].expand(-1, -1, z.shape[2], -1, -1)
        return z + self.fusion(torch.cat([z, zp_b], dim=1))

    def forward(self, z: torch.Tensor, fnc: torch.Tensor):
        zp = self.project_fnc(fnc)
        return self.fuse(z, zp), zp


def project_fnc(fnc: torch.Tensor, params: LFFM) -> torch.Tensor:
    return params.project_fnc(fnc)


def fuse(z: torch.Tensor, zp: torch.Tensor, params: LFFM) -> torch.Tensor:
    return params.fuse(z, zp)
