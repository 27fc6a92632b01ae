"""Attention-received saliency maps over the sMRI volume, plus overlay export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .classifier import AttentionRecord, MultimodalClassifier
from .container import dump_json, write_array
from .data import StructuralVolume
from .errors import DataError, ShapeError

FUSED = "fused"


@dataclass(frozen=True, eq=False)
class SaliencyVolume:
    values: np.ndarray
    # True when the scores were constant and the 0.5 fallback was used
    degenerate: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ShapeError(f"saliency must be 3D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise DataError("saliency values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)


def token_attention_scores(record: AttentionRecord) -> np.ndarray:
    """Attention received by each fused-stream token, averaged over layers, heads, queries and batch.

    Matrices whose keys are fused tokens are averaged. Cross-attention uses
    fused tokens as queries, so its key columns belong to the FNC stream and
    do not enter.
    """
    mats = record.stream(FUSED)
    if not mats:
        raise DataError("attention record holds no fused-stream matrices")
    n = mats[0].shape[-1]
    cols = []
    for a in mats:
        if a.shape[-1] != n:
            raise ShapeError("fused-stream matrices disagree on token count")
        # (B, H, Nq, Nk) -> one column-mean vector per (batch, head)
        cols.append(a.detach().double().mean(dim=2).reshape(-1, n))
    return torch.cat(cols).mean(dim=0).numpy()


def scores_to_volume(scores, patch_map, latent_dims, ambient_dims) -> SaliencyVolume:
    """Paint token scores onto the token grid, upsample trilinearly and min-max normalise."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) != len(patch_map):
        raise ShapeError(f"{len(scores)} scores for {len(patch_map)} tokens")
    grid = np.zeros(tuple(latent_dims), dtype=np.float64)
    painted = np.zeros(grid.shape, dtype=bool)
    for s, block in zip(scores, patch_map):
        grid[block] = s
        painted[block] = True
    if not painted.all():
        raise ShapeError("patch map does not cover the token grid")
    up = F.interpolate(torch.from_numpy(grid)[None, None], size=tuple(ambient_dims), mode="trilinear",
                       align_corners=False)[0, 0].numpy()
    lo, hi = up.min(), up.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return SaliencyVolume(np.full(tuple(ambient_dims), 0.5, dtype=np.float32), degenerate=True)
    return SaliencyVolume(((up - lo) / (hi - lo)).astype(np.float32))


@torch.no_grad()
def subject_saliency(model: MultimodalClassifier, volume: torch.Tensor, fnc: torch.Tensor,
                     latent: torch.Tensor | None = None) -> list[SaliencyVolume]:
    """One saliency volume per batch element at the model's ambient volume dims."""
    if not model.uses_mri:
        raise DataError("model has no sMRI token stream")
    model.eval()
    _, record = model(volume, fnc, latent)
    return [scores_to_volume(token_attention_scores(record.select(i)), model.smri_patch_map,
                             model.smri_grid, model.volume_dims)
            for i in range(volume.shape[0])]


def roi_summary(saliencies: list[SaliencyVolume], roi: np.ndarray) -> dict:
    if not saliencies:
        raise DataError("no saliency volumes to summarise")
    roi = np.asarray(roi, dtype=bool)
    inside = [float(s.values[roi].mean()) for s in saliencies]
    outside = [float(s.values[~roi].mean()) for s in saliencies]
    return {"n_subjects": len(saliencies), "inside_mean": float(np.mean(inside)),
            "outside_mean": float(np.mean(outside)),
            "n_degenerate": sum(s.degenerate for s in saliencies)}


# --------------------------------------------------------------------------- rendering

def grayscale_render(anatomy: np.ndarray) -> np.ndarray:
    """(H, W) intensities in [0, 1] -> (H, W, 3) uint8."""
    g = np.round(np.clip(anatomy, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def color_ramp(s: np.ndarray) -> np.ndarray:
    """Monotone black-red-yellow ramp; (H, W) in [0, 1] -> (H, W, 3) floats in [0, 1]."""
    s = np.clip(s, 0.0, 1.0)
    return np.stack([np.clip(2 * s, 0, 1), np.clip(2 * s - 1, 0, 1), np.zeros_like(s)], axis=-1)


def overlay_render(anatomy: np.ndarray, saliency: np.ndarray) -> np.ndarray:
    """Alpha-blend the ramp over the grayscale base with alpha = saliency."""
    base = grayscale_render(anatomy).astype(np.float64) / 255.0
    alpha = np.clip(saliency, 0.0, 1.0)[..., None]
    out = (1.0 - alpha) * base + alpha * color_ramp(saliency)
    return np.round(out * 255.0).astype(np.uint8)


def _slice_indices(depth: int, slices) -> list[int]:
    if slices is None:
        slices = min(depth, 8)
    if isinstance(slices, int):
        if not 1 <= slices <= depth:
            raise DataError(f"slice count must lie in 1..{depth}")
        return [int(round(x)) for x in np.linspace(0, depth - 1, slices + 2)[1:-1]] if slices < depth \
            else list(range(depth))
    idx = [int(i) for i in slices]
    if any(not 0 <= i < depth for i in idx):
        raise DataError(f"slice indices must lie in 0..{depth - 1}")
    return idx


def export_overlay(volume: StructuralVolume, sal: SaliencyVolume, path: str | Path, slices=None,
                   meta: dict | None = None) -> dict:
    """Write ``saliency.json`` (+ payload), one PNG per axial slice and a montage.

    Axial slices index the first volume axis. ``slices`` is a count (evenly
    spaced) or an explicit index list. Returns the written file paths.
    """
    if volume.dims != sal.dims:
        raise ShapeError(f"volume dims {volume.dims} != saliency dims {sal.dims}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = write_array(sal.values, path / "saliency.json", "saliency",
                         {**(meta or {}), "degenerate": sal.degenerate})
    images = []
    tiles = []
    for i in _slice_indices(volume.dims[0], slices):
        rgb = overlay_render(volume.voxels[i], sal.values[i])
        p = path / f"slice_{i:03d}.png"
        Image.fromarray(rgb).save(p)
        images.append(p)
        tiles.append(rgb)
    cols = min(4, len(tiles))
    rows = -(-len(tiles) // cols)
    h, w = tiles[0].shape[:2]
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for n, tile in enumerate(tiles):
        r, c = divmod(n, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = tile
    montage = path / "montage.png"
    Image.fromarray(grid).save(montage)
    return {"volume": header, "slices": images, "montage": montage}


def write_summary(summary: dict, path: str | Path) -> None:
    dump_json(summary, path)
