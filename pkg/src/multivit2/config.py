"""Run configuration: one JSON document, two presets (``desk`` and ``paper``)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .autoencoder import AEDescriptor, AEHyper
from .classifier import ViTConfig
from .container import canonical_hash
from .diffusion import DiffusionHyper, make_schedule, scaled_linear_schedule
from .data import SynthSpec
from .errors import ConfigError


@dataclass
class DataConfig:
    n: int = 200
    mode: str = "additive"
    dims: tuple = (24, 28, 24)
    n_components: int = 16
    volume_shift: float = 0.6
    fnc_shift: float = 0.6
    roi_center: tuple | None = None
    roi_radii: tuple | None = None
    # size of the separate unlabeled cohort the extractor is pretrained on
    n_pretrain: int = 64

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(dims=tuple(self.dims), n_components=self.n_components,
                         roi_center=tuple(self.roi_center) if self.roi_center else None,
                         roi_radii=tuple(self.roi_radii) if self.roi_radii else None,
                         volume_shift=self.volume_shift, fnc_shift=self.fnc_shift)


@dataclass
class AutoencoderConfig:
    channels: tuple = (16, 32)
    latent_channels: int = 4
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    lambda_recon: float = 1.0
    lambda_kl: float = 1e-2

    def descriptor(self, dims) -> AEDescriptor:
        return AEDescriptor(tuple(dims), tuple(self.channels), self.latent_channels)

    def hyper(self) -> AEHyper:
        return AEHyper(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                       lambda_recon=self.lambda_recon, lambda_kl=self.lambda_kl)


@dataclass
class DiffusionConfig:
    T: int = 50
    beta_start: float | None = None
    beta_end: float | None = None
    width: int = 32
    steps: int = 400
    batch_size: int = 16
    lr: float = 2e-3

    def schedule(self):
        if self.beta_start is None and self.beta_end is None:
            return scaled_linear_schedule(self.T)
        default = scaled_linear_schedule(self.T)
        return make_schedule("linear", self.beta_start if self.beta_start is not None else default.beta_start,
                             self.beta_end if self.beta_end is not None else default.beta_end, self.T)

    def hyper(self) -> DiffusionHyper:
        return DiffusionHyper(steps=self.steps, batch_size=self.batch_size, lr=self.lr)


@dataclass
class AugmentConfig:
    ratio: float = 0.5
    fnc_noise: float = 0.02
    refit_per_fold: bool = False
    min_subjects: int = 10


@dataclass
class ClassifierConfig:
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    ff_hidden: int = 64
    head_hidden: int = 64
    latent_patch: tuple = (1, 1, 1)
    volume_patch: tuple = (8, 7, 8)
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    warmup_epochs: int = 5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4
    freeze_extractor: bool = True

    def vit(self) -> ViTConfig:
        return ViTConfig(self.embed_dim, self.depth, self.heads, self.ff_hidden, self.head_hidden,
                         tuple(self.latent_patch), tuple(self.volume_patch))


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    out: str = "runs/desk"
    k: int = 5
    data: DataConfig = field(default_factory=DataConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")  # where results go does not change what they are
        return canonical_hash(d)

    def validate(self) -> "RunConfig":
        d = self.data
        if d.mode not in ("additive", "xor"):
            raise ConfigError(f"data.mode must be additive or xor, got {d.mode!r}")
        if d.n < 10 or d.n % 2:
            raise ConfigError(f"data.n must be an even count >= 10, got {d.n}")
        if len(d.dims) != 3 or min(d.dims) < 1:
            raise ConfigError(f"data.dims must be three positive ints, got {d.dims}")
        if d.n_components < 2:
            raise ConfigError("data.n_components must be >= 2")
        center, radii = d.synth_spec().roi()
        for c, r, size in zip(center, radii, d.dims):
            if c - r < 0 or c + r > size - 1:
                raise ConfigError(f"ROI {center}/{radii} does not fit dims {tuple(d.dims)}")
        if self.k < 2 or d.n // 2 < self.k:
            raise ConfigError(f"k={self.k} folds impossible with {d.n // 2} subjects per class")
        if d.n_pretrain < 1:
            raise ConfigError("data.n_pretrain must be positive")
        try:
            desc = self.autoencoder.descriptor(d.dims)
        except ConfigError as exc:
            raise ConfigError(f"autoencoder: {exc}") from exc
        if self.autoencoder.lambda_recon < 0 or self.autoencoder.lambda_kl < 0:
            raise ConfigError("autoencoder loss weights must be non-negative")
        try:
            self.diffusion.schedule()
        except ConfigError as exc:
            raise ConfigError(f"diffusion: {exc}") from exc
        if self.augment.ratio < 0:
            raise ConfigError("augment.ratio must be >= 0")
        c = self.classifier
        if c.embed_dim % c.heads:
            raise ConfigError("classifier.embed_dim must be divisible by classifier.heads")
        grid = desc.latent_shape[1:]
        if any(g % p for g, p in zip(grid, c.latent_patch)):
            raise ConfigError(f"latent grid {grid} not divisible by latent_patch {tuple(c.latent_patch)}")
        if any(g % p for g, p in zip(d.dims, c.volume_patch)):
            raise ConfigError(f"volume dims {tuple(d.dims)} not divisible by volume_patch {tuple(c.volume_patch)}")
        if c.epochs < 0 or c.warmup_epochs < 0 or c.batch_size < 1 or c.lr <= 0:
            raise ConfigError("classifier epochs/warmup must be >= 0, batch_size >= 1, lr > 0")
        return self


PRESETS = {
    "desk": {},
    # lr 3e-4, 150 epochs, 20-epoch warm-up
    "paper": {"classifier": {"lr": 3e-4, "epochs": 150, "warmup_epochs": 20}},
}


def _build(cls, values: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Preset defaults, then the JSON file, then explicit overrides."""
    doc = {}
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    name = preset or doc.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = _merge(_merge({"preset": name}, PRESETS[name]), doc)
    merged["preset"] = name
    if overrides:
        merged = _merge(merged, overrides)
    return _build(RunConfig, merged, "config").validate()
