"""ViT pipeline: tokenizers, pre-norm transformer stacks, cross-attention late fusion, MLP head.

Architecture modes:

* ``vit-unimodal``: one token stream (sMRI volume patches or FNC rows), no fusion.
* ``multivit1``: both modalities tokenized straight from the raw data, one
  transformer stack per stream, a single cross-attention fusion.
* ``hybrid``: the full model. With ``lffm=True`` the sMRI stream comes from
  the pretrained encoder fused with the FNC latent; with ``lffm=False`` a
  trainable conv stem replaces the pretrained extractor and there is no
  early fusion.
"""

from __future__ import annotations

import copy
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import KLAutoencoder, _halve
from .errors import ConfigError, ShapeError
from .lffm import LFFM, extract_latent

ARCHS = ("vit-unimodal", "multivit1", "hybrid")


@dataclass
class AttentionRecord:
    """Attention matrices keyed by stream; each entry has shape (B, heads, N_q, N_kv)."""

    entries: list[tuple[str, int, torch.Tensor]] = field(default_factory=list)

    def add(self, stream: str, layer: int, attn: torch.Tensor) -> None:
        self.entries.append((stream, layer, attn))

    def extend(self, other: "AttentionRecord") -> None:
        self.entries.extend(other.entries)

    def stream(self, name: str) -> list[torch.Tensor]:
        return [a for s, _, a in self.entries if s == name]

    def __len__(self) -> int:
        return len(self.entries)

    def n_matrices(self) -> int:
        return sum(a.shape[1] for _, _, a in self.entries)

    def select(self, index: int) -> "AttentionRecord":
        """Record restricted to one batch element."""
        return AttentionRecord([(s, l, a[index:index + 1]) for s, l, a in self.entries])


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, xq: torch.Tensor, xkv: torch.Tensor):
        b, nq, e = xq.shape
        nk = xkv.shape[1]
        dh = e // self.heads
        q = self.q(xq).view(b, nq, self.heads, dh).transpose(1, 2)
        k = self.k(xkv).view(b, nk, self.heads, dh).transpose(1, 2)
        v = self.v(xkv).view(b, nk, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, e)
        return self.o(out), attn


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_hidden), nn.GELU(), nn.Linear(ff_hidden, dim))

    def forward(self, x: torch.Tensor):
        h = self.norm1(x)
        a, attn = self.attn(h, h)
        x = x + a
        x = x + self.ff(self.norm2(x))
        return x, attn


class CrossAttentionBlock(nn.Module):
    """Queries from the fused stream, keys/values from the FNC stream; residual on the queries."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, q_seq: torch.Tensor, kv_seq: torch.Tensor):
        if q_seq.shape[-1] != kv_seq.shape[-1]:
            raise ShapeError(f"embed dims differ: {q_seq.shape[-1]} vs {kv_seq.shape[-1]}")
        a, attn = self.attn(self.norm_q(q_seq), self.norm_kv(kv_seq))
        return q_seq + a, attn


def transformer_stack(seq: torch.Tensor, blocks, stream: str = "fused"):
    record = AttentionRecord()
    for layer, block in enumerate(blocks):
        seq, attn = block(seq)
        record.add(stream, layer, attn)
    return seq, record


def cross_attention(q_seq: torch.Tensor, kv_seq: torch.Tensor, block: CrossAttentionBlock):
    return block(q_seq, kv_seq)


class PatchTokenizer(nn.Module):
    """Non-overlapping 3D patches of a (B, C, D, H, W) grid, linearly projected."""

    def __init__(self, in_channels: int, grid: tuple[int, int, int], patch: tuple[int, int, int], dim: int):
        super().__init__()
        grid, patch = tuple(grid), tuple(patch)
        if any(g % p for g, p in zip(grid, patch)):
            raise ConfigError(f"grid {grid} not divisible by patch {patch}")
        self.grid, self.patch = grid, patch
        self.counts = tuple(g // p for g, p in zip(grid, patch))
        self.proj = nn.Linear(in_channels * int(np.prod(patch)), dim)
        self.pos = nn.Parameter(torch.randn(int(np.prod(self.counts)), dim) * 0.02)

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.counts))

    @property
    def patch_map(self) -> list[tuple[slice, slice, slice]]:
        """Token index -> grid block (slices along D, H, W), in token order."""
        out = []
        for i, j, k in itertools.product(*(range(c) for c in self.counts)):
            out.append(tuple(slice(n * p, (n + 1) * p) for n, p in zip((i, j, k), self.patch)))
        return out

    def patches(self, z: torch.Tensor) -> torch.Tensor:
        b, c = z.shape[:2]
        if tuple(z.shape[2:]) != self.grid:
            raise ShapeError(f"expected grid {self.grid}, got {tuple(z.shape[2:])}")
        (nd, nh, nw), (pd, ph, pw) = self.counts, self.patch
        x = z.reshape(b, c, nd, pd, nh, ph, nw, pw)
        x = x.permute(0, 2, 4, 6, 1, 3, 5, 7)
        return x.reshape(b, nd * nh * nw, c * pd * ph * pw)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.proj(self.patches(z)) + self.pos


class RowTokenizer(nn.Module):
    """One token per spatial row of a (B, C, h, w) map."""

    def __init__(self, in_channels: int, rows: int, cols: int, dim: int):
        super().__init__()
        self.rows, self.cols = rows, cols
        self.proj = nn.Linear(in_channels * cols, dim)
        self.pos = nn.Parameter(torch.randn(rows, dim) * 0.02)

    def rows_of(self, zp: torch.Tensor) -> torch.Tensor:
        b, c, h, w = zp.shape
        if (h, w) != (self.rows, self.cols):
            raise ShapeError(f"expected ({self.rows}, {self.cols}) map, got {(h, w)}")
        return zp.permute(0, 2, 1, 3).reshape(b, h, c * w)

    def forward(self, zp: torch.Tensor) -> torch.Tensor:
        return self.proj(self.rows_of(zp)) + self.pos


class ClassifierHead(nn.Module):
    def __init__(self, dim: int, hidden: int, n_classes: int = 2):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, n_classes))

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """Logits from the mean-pooled token sequence."""
        return self.mlp(self.norm(seq.mean(dim=1)))


def classify(seq: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    return torch.softmax(head(seq), dim=-1)


class ConvStem(nn.Module):
    """Trainable stand-in for the pretrained extractor: the encoder architecture, mean head only."""

    def __init__(self, in_dims, channels, latent_channels):
        super().__init__()
        chans = (1, *channels, latent_channels)
        self.convs = nn.ModuleList([nn.Conv3d(chans[i], chans[i + 1], 3, stride=2, padding=1)
                                    for i in range(len(chans) - 1)])
        dims = tuple(in_dims)
        for _ in self.convs:
            dims = tuple(_halve(n) for n in dims)
        self.out_shape = (latent_channels, *dims)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x[:, None] if x.dim() == 4 else x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.silu(h)
        return h


class InputNorm(nn.Module):
    """Elementwise standardisation; identity until fitted on training inputs."""

    def __init__(self, shape):
        super().__init__()
        self.register_buffer("mean", torch.zeros(tuple(shape)))
        self.register_buffer("std", torch.ones(tuple(shape)))

    @torch.no_grad()
    def fit(self, x: torch.Tensor) -> None:
        if tuple(x.shape[1:]) != tuple(self.mean.shape):
            raise ShapeError(f"expected inputs of shape {tuple(self.mean.shape)}, got {tuple(x.shape[1:])}")
        x = x.double()
        std = x.std(dim=0, unbiased=False)
        # constant elements (background, FNC diagonal) are only centred
        self.mean.copy_(x.mean(dim=0))
        self.std.copy_(torch.where(std > 1e-6, std, torch.ones_like(std)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


@dataclass(frozen=True)
class ViTConfig:
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    ff_hidden: int = 64
    head_hidden: int = 64
    latent_patch: tuple[int, int, int] = (1, 1, 1)
    volume_patch: tuple[int, int, int] = (8, 7, 8)

    def to_dict(self) -> dict:
        return {"embed_dim": self.embed_dim, "depth": self.depth, "heads": self.heads,
                "ff_hidden": self.ff_hidden, "head_hidden": self.head_hidden,
                "latent_patch": list(self.latent_patch), "volume_patch": list(self.volume_patch)}

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        d = dict(d)
        d["latent_patch"] = tuple(d["latent_patch"])
        d["volume_patch"] = tuple(d["volume_patch"])
        return cls(**d)


class MultimodalClassifier(nn.Module):
    def __init__(self, arch: str, modalities: str, lffm: bool, volume_dims, n_components: int,
                 vit: ViTConfig = ViTConfig(), extractor: KLAutoencoder | None = None,
                 freeze_extractor: bool = True, stem_channels=(16, 32), latent_channels: int = 4):
        super().__init__()
        if arch not in ARCHS:
            raise ConfigError(f"unknown architecture {arch!r}")
        if modalities not in ("MRI", "FNC", "MRI+FNC"):
            raise ConfigError(f"unknown modalities {modalities!r}")
        if arch == "vit-unimodal" and (modalities == "MRI+FNC" or lffm):
            raise ConfigError("unimodal ViT takes exactly one modality and no LFFM")
        if arch != "vit-unimodal" and modalities != "MRI+FNC":
            raise ConfigError(f"{arch} needs both modalities")
        if lffm and arch != "hybrid":
            raise ConfigError("LFFM is only available in the hybrid architecture")
        if lffm and extractor is None:
            raise ConfigError("LFFM needs a pretrained extractor")
        self.arch, self.modalities, self.use_lffm = arch, modalities, lffm
        self.volume_dims, self.n_components = tuple(volume_dims), n_components
        self.vit = vit
        self.freeze_extractor = freeze_extractor
        self.stem_channels, self.latent_channels = tuple(stem_channels), latent_channels
        e = vit.embed_dim
        self.uses_mri = modalities in ("MRI", "MRI+FNC")
        self.uses_fnc = modalities in ("FNC", "MRI+FNC")

        self.extractor = self.stem = self.lffm = None
        self.volume_norm = self.latent_norm = self.fnc_norm = None
        if self.uses_mri:
            if lffm:
                self.extractor = copy.deepcopy(extractor)
                if freeze_extractor:
                    self.extractor.requires_grad_(False)
                latent_shape = self.extractor.descriptor.latent_shape
                self.lffm = LFFM(latent_shape)
                self.latent_norm = InputNorm(latent_shape)
                self.smri_tok = PatchTokenizer(latent_shape[0], latent_shape[1:], vit.latent_patch, e)
                self.smri_grid = latent_shape[1:]
            elif arch == "hybrid":
                self.stem = ConvStem(volume_dims, stem_channels, latent_channels)
                self.smri_tok = PatchTokenizer(latent_channels, self.stem.out_shape[1:], vit.latent_patch, e)
                self.smri_grid = self.stem.out_shape[1:]
            else:
                self.smri_tok = PatchTokenizer(1, volume_dims, vit.volume_patch, e)
                self.smri_grid = tuple(volume_dims)
            if not lffm:
                self.volume_norm = InputNorm(self.volume_dims)
            self.smri_blocks = nn.ModuleList([SelfAttentionBlock(e, vit.heads, vit.ff_hidden) for _ in range(vit.depth)])
        if self.uses_fnc:
            self.fnc_norm = InputNorm((n_components, n_components))
            if lffm:
                cz, h, w = self.lffm.fnc_latent_shape
                self.fnc_tok = RowTokenizer(cz, h, w, e)
            else:
                self.fnc_tok = RowTokenizer(1, n_components, n_components, e)
            self.fnc_blocks = nn.ModuleList([SelfAttentionBlock(e, vit.heads, vit.ff_hidden) for _ in range(vit.depth)])
        self.cross = CrossAttentionBlock(e, vit.heads) if modalities == "MRI+FNC" else None
        self.head = ClassifierHead(e, vit.head_hidden)

    @property
    def smri_patch_map(self):
        return self.smri_tok.patch_map if self.uses_mri else None

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def latents(self, volumes: torch.Tensor) -> torch.Tensor:
        return extract_latent(volumes, self.extractor)

    def fit_input_norms(self, volume: torch.Tensor, fnc: torch.Tensor, latent: torch.Tensor | None = None) -> None:
        """Fit the standardisers on training inputs (latents extracted if not given)."""
        if self.volume_norm is not None:
            self.volume_norm.fit(volume)
        if self.latent_norm is not None:
            self.latent_norm.fit(latent if latent is not None else self.latents(volume))
        if self.fnc_norm is not None:
            self.fnc_norm.fit(fnc)

    def forward(self, volume: torch.Tensor | None, fnc: torch.Tensor | None, latent: torch.Tensor | None = None):
        """Return ``(logits, AttentionRecord)`` for a batch.

        ``latent`` may carry precomputed extractor outputs when the extractor is frozen.
        """
        record = AttentionRecord()
        fused_seq = fnc_seq = None
        zp = None
        if self.uses_fnc:
            fnc = self.fnc_norm(fnc)
        if self.uses_mri:
            if self.use_lffm:
                if not self.freeze_extractor:
                    latent = self.extractor.encode(volume).mu
                elif latent is None:
                    latent = self.latents(volume)
                latent = self.latent_norm(latent.to(self.lffm.lift.weight.dtype))
                z, zp = self.lffm(latent, fnc)
            else:
                volume = self.volume_norm(volume)
                z = self.stem(volume) if self.stem is not None else (volume[:, None] if volume.dim() == 4 else volume)
            fused_seq, rec = transformer_stack(self.smri_tok(z.to(self.smri_tok.proj.weight.dtype)),
                                               self.smri_blocks, "fused")
            record.extend(rec)
        if self.uses_fnc:
            if zp is None:
                zp = fnc[:, None] if fnc.dim() == 3 else fnc
            fnc_seq, rec = transformer_stack(self.fnc_tok(zp.to(self.fnc_tok.proj.weight.dtype)),
                                             self.fnc_blocks, "fnc")
            record.extend(rec)
        if self.cross is not None:
            seq, attn = self.cross(fused_seq, fnc_seq)
            record.add("cross", 0, attn)
        else:
            seq = fused_seq if fused_seq is not None else fnc_seq
        return self.head(seq), record

    def predict_proba(self, volume, fnc, latent=None):
        logits, record = self(volume, fnc, latent)
        return torch.softmax(logits, dim=-1), record

    def descriptor(self) -> dict:
        return {"arch": self.arch, "modalities": self.modalities, "lffm": self.use_lffm,
                "volume_dims": list(self.volume_dims), "n_components": self.n_components,
                "vit": self.vit.to_dict(), "freeze_extractor": self.freeze_extractor,
                "stem_channels": list(self.stem_channels), "latent_channels": self.latent_channels}
