"""Labeled data augmentation from per-class latent diffusion models.

Each class gets its own unconditional LDM, so generated subjects inherit the
label by construction. The generated subject's FNC is a perturbed copy of a
random same-label donor's FNC.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .autoencoder import KLAutoencoder, load_state, state_tensors, volumes_tensor
from .container import load_checkpoint, save_checkpoint
from .data import (DatasetManifest, FNCMatrix, FoldAssignment, Provenance, StructuralVolume,
                   SubjectRecord, ceil_ratio)
from .diffusion import Denoiser, DiffusionHyper, NoiseSchedule, sample, scaled_linear_schedule, train_denoiser
from .errors import ConfigError, DataError
from .lffm import extract_latent
from .rng import derive_seed, seeded


@dataclass
class ClassAugmenter:
    label: int
    denoiser: Denoiser
    schedule: NoiseSchedule
    autoencoder: KLAutoencoder
    # per-channel standardisation of the latent corpus; the LDM works in standardised units
    latent_mean: torch.Tensor
    latent_std: torch.Tensor
    corpus_ids: tuple[str, ...]
    loss_curve: list[float]

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return self.autoencoder.descriptor.latent_shape


def fit_augmenter(manifest: DatasetManifest, label: int, ae: KLAutoencoder, hyper: DiffusionHyper = DiffusionHyper(),
                  seed: int = 0, schedule: NoiseSchedule | None = None, width: int = 32,
                  subject_ids=None, min_subjects: int = 10) -> ClassAugmenter:
    """Train a denoiser on posterior-mean latents of the real subjects carrying ``label``."""
    allowed = set(subject_ids) if subject_ids is not None else None
    pool = [s for s in manifest.real() if s.label == label and (allowed is None or s.id in allowed)]
    if len(pool) < min_subjects:
        raise DataError(f"need at least {min_subjects} real subjects with label {label}, found {len(pool)}")
    schedule = schedule or scaled_linear_schedule(50)
    latents = extract_latent(volumes_tensor([s.volume for s in pool]), ae)
    mean = latents.mean(dim=(0, 2, 3, 4), keepdim=True)
    std = latents.std(dim=(0, 2, 3, 4), keepdim=True) + 1e-6
    corpus = (latents - mean) / std
    with seeded(seed):
        model = Denoiser(ae.descriptor.latent_channels, width, schedule.T)
    model, curve = train_denoiser(corpus, model, schedule, hyper, seed)
    return ClassAugmenter(label, model, schedule, ae, mean[0], std[0], tuple(s.id for s in pool), curve)


def save_augmenter(aug: ClassAugmenter, path, extra: dict | None = None):
    descriptor = {"label": aug.label, "denoiser": aug.denoiser.config, "schedule": aug.schedule.to_dict(),
                  "corpus_ids": list(aug.corpus_ids)}
    tensors = {**{f"denoiser.{k}": v for k, v in state_tensors(aug.denoiser).items()},
               "latent_mean": aug.latent_mean, "latent_std": aug.latent_std}
    return save_checkpoint(path, "augmenter", descriptor, tensors, {"loss_curve": aug.loss_curve, **(extra or {})})


def load_augmenter(path, ae: KLAutoencoder, stage: str | None = "train-ldm"):
    """Return ``(augmenter, header)``."""
    desc, tensors, header = load_checkpoint(path, "augmenter", stage)
    denoiser = Denoiser(**desc["denoiser"])
    load_state(denoiser, {k[len("denoiser."):]: v for k, v in tensors.items() if k.startswith("denoiser.")})
    denoiser.eval()
    aug = ClassAugmenter(desc["label"], denoiser, NoiseSchedule.from_dict(desc["schedule"]), ae,
                         torch.from_numpy(tensors["latent_mean"]), torch.from_numpy(tensors["latent_std"]),
                         tuple(desc["corpus_ids"]), header.get("extra", {}).get("loss_curve", []))
    return aug, header


def perturb_fnc(entries: np.ndarray, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    c = entries.shape[0]
    upper = np.triu(rng.normal(0.0, std, (c, c)), 1)
    out = np.clip(entries.astype(np.float64) + upper + upper.T, -1.0, 1.0)
    np.fill_diagonal(out, 1.0)
    return out.astype(np.float32)


@torch.no_grad()
def generate_subjects(aug: ClassAugmenter, n: int, donors: list[SubjectRecord], seed: int,
                      id_prefix: str = "aug", tag: Callable[[SubjectRecord], tuple] | None = None,
                      fnc_noise: float = 0.02) -> list[SubjectRecord]:
    """Decode ``n`` LDM samples into ldm-augmented records.

    ``tag`` maps the FNC donor to the folds whose training phase may use the
    generated record.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if not donors:
        raise DataError("donor pool is empty")
    if any(d.label != aug.label for d in donors):
        raise DataError("donor pool must share the augmenter's label")
    seeds = [derive_seed(seed, i) for i in range(n)]
    z = sample(aug.denoiser, aug.schedule, (n, *aug.latent_shape), seeds)
    z = z * aug.latent_std + aug.latent_mean
    volumes = aug.autoencoder.decode(z)[:, 0].clamp(0.0, 1.0).numpy()
    records = []
    for i in range(n):
        rng = np.random.default_rng(seeds[i])
        donor = donors[int(rng.integers(len(donors)))]
        records.append(SubjectRecord(
            id=f"{id_prefix}-L{aug.label}-{i:04d}",
            volume=StructuralVolume(volumes[i], donor.volume.spacing),
            fnc=FNCMatrix(perturb_fnc(donor.fnc.entries, rng, fnc_noise)),
            label=aug.label,
            provenance=Provenance.AUGMENTED,
            site="ldm",
            train_folds=tag(donor) if tag is not None else None,
        ))
    return records


def augment_training_folds(manifest: DatasetManifest, folds: FoldAssignment, ratio: float,
                           augmenters: dict[int, ClassAugmenter], seed: int, fold: int | None = None,
                           fnc_noise: float = 0.02) -> DatasetManifest:
    """Append ``ceil(ratio * real_count)`` generated subjects per class.

    With ``fold=None`` the records serve every fold except the one holding
    their FNC donor. With a fold index, counts and donors come from that
    fold's training subjects and the records are tagged for it alone.
    """
    if ratio < 0:
        raise ConfigError("ratio must be >= 0")
    if ratio == 0:
        return manifest
    for label in (0, 1):
        if label not in augmenters:
            raise ConfigError(f"no augmenter for class {label}")
    real = manifest.real()
    generated = []
    for label in (0, 1):
        if fold is None:
            donors = [s for s in real if s.label == label]
            prefix = "aug"

            def tag(d, k=folds.k):
                return tuple(f for f in range(k) if f != folds.assignment[d.id])
        else:
            donors = [s for s in real if s.label == label and folds.assignment[s.id] != fold]
            prefix = f"aug-f{fold}"

            def tag(d, f=fold):
                return (f,)
        count = ceil_ratio(ratio, len(donors))
        if count == 0:
            continue
        generated += generate_subjects(augmenters[label], count, donors,
                                       derive_seed(seed, label, 0 if fold is None else fold + 1),
                                       id_prefix=prefix, tag=tag, fnc_noise=fnc_noise)
    return manifest.with_subjects(generated)
