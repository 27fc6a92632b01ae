"""Per-fold classifier training, k-fold CV and the five-row experiment matrix."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augmentation import augment_training_folds, fit_augmenter
from .autoencoder import AEDescriptor, KLAutoencoder, load_state, state_tensors, train_autoencoder
from .config import RunConfig
from .container import dump_json, load_checkpoint, save_checkpoint
from .data import DatasetManifest, FoldAssignment, SubjectRecord, make_folds, synthesize_dataset
from .errors import ConfigError, LeakageError, MultiViT2Error, NonFiniteError
from .classifier import MultimodalClassifier, ViTConfig
from .metrics import compute_accuracy, compute_auc
from .optim import AdamW, LRState, lr_at
from .rng import derive_seed, seeded

log = logging.getLogger(__name__)

TABLE_COLUMNS = ["Name", "Main Model", "Data", "LFFM", "Augmented", "Accuracy", "AUC"]


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    arch: str
    modalities: str
    lffm: bool
    augmented: bool
    warmup: bool
    main_model: str
    data_label: str
    lffm_label: str
    augmented_label: str
    in_matrix: bool = True

    def table_row(self) -> dict:
        return {"Name": self.name, "Main Model": self.main_model, "Data": self.data_label,
                "LFFM": self.lffm_label, "Augmented": self.augmented_label}


BASELINE1 = ExperimentSpec("Baseline1", "vit-unimodal", "MRI", False, False, False, "ViT", "MRI", "-", "-")
BASELINE2 = ExperimentSpec("Baseline2", "multivit1", "MRI+FNC", False, False, False, "MultiViT", "MRI/FNC", "No", "No")
ABLATION1 = ExperimentSpec("Ablation1", "hybrid", "MRI+FNC", False, True, True, "CNN/ViT", "MRI/FNC", "No", "Yes")
ABLATION2 = ExperimentSpec("Ablation2", "hybrid", "MRI+FNC", True, False, True, "CNN/ViT", "MRI/FNC", "Yes", "No")
MULTIVIT2 = ExperimentSpec("MultiViT2", "hybrid", "MRI+FNC", True, True, True, "MultiViT2", "MRI/FNC", "Yes", "Yes")
# outside the five matrix rows: the FNC-only unimodal baseline
BASELINE1_FNC = ExperimentSpec("Baseline1-FNC", "vit-unimodal", "FNC", False, False, False, "ViT", "FNC", "-", "-",
                               in_matrix=False)

MATRIX_ROWS = (BASELINE1, BASELINE2, ABLATION1, ABLATION2, MULTIVIT2)
PRESETS = {s.name: s for s in (*MATRIX_ROWS, BASELINE1_FNC)}


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    auc: float
    eval_ids: list[str]
    train_ids: list[str]
    probs: np.ndarray
    labels: np.ndarray
    curve: list[dict]
    model: MultimodalClassifier | None = None


@dataclass
class MetricsReport:
    name: str
    k: int
    fold_accuracy: list[float]
    fold_auc: list[float]
    config_hash: str
    seed: int
    fold_results: list[FoldResult] = field(default_factory=list, repr=False)
    # wall-clock seconds; kept out of the serialised report so outputs stay byte-stable
    elapsed: float = field(default=0.0, repr=False)

    def __post_init__(self):
        if len(self.fold_accuracy) != self.k or len(self.fold_auc) != self.k:
            raise ConfigError(f"expected {self.k} fold entries")

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy))

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.fold_auc))

    def to_dict(self) -> dict:
        return {"name": self.name, "k": self.k, "seed": self.seed, "config_hash": self.config_hash,
                "folds": [{"fold": i, "accuracy": a, "auc": u}
                          for i, (a, u) in enumerate(zip(self.fold_accuracy, self.fold_auc))],
                "mean_accuracy": self.mean_accuracy, "mean_auc": self.mean_auc}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "accuracy", "auc"])
        for i, (a, u) in enumerate(zip(self.fold_accuracy, self.fold_auc)):
            w.writerow([i, f"{a:.6f}", f"{u:.6f}"])
        w.writerow(["mean", f"{self.mean_accuracy:.6f}", f"{self.mean_auc:.6f}"])
        return buf.getvalue()

    def write(self, directory: str | Path, stem: str = "metrics") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        dump_json(self.to_dict(), directory / f"{stem}.json")


# --------------------------------------------------------------------------- stages

def pretrain_extractor(cfg: RunConfig, seed: int):
    """Pretrain the autoencoder on a separate unlabeled synthetic cohort.

    Returns ``(autoencoder, loss_curve)``.
    """
    n = cfg.data.n_pretrain + cfg.data.n_pretrain % 2
    cohort = synthesize_dataset(max(n, 10), "additive", spec=cfg.data.synth_spec(),
                                seed=derive_seed(seed, 101), id_prefix="pre")
    with seeded(derive_seed(seed, 102)):
        ae = KLAutoencoder(cfg.autoencoder.descriptor(cfg.data.dims))
    ae, curve = train_autoencoder(cohort, ae, cfg.autoencoder.hyper(), derive_seed(seed, 103))
    ae.requires_grad_(False)
    return ae, curve


def fit_class_augmenters(manifest: DatasetManifest, cfg: RunConfig, ae: KLAutoencoder, seed: int,
                         subject_ids=None, labels=(0, 1)) -> dict:
    return {label: fit_augmenter(manifest, label, ae, cfg.diffusion.hyper(), derive_seed(seed, 200 + label),
                                 cfg.diffusion.schedule(), cfg.diffusion.width, subject_ids,
                                 cfg.augment.min_subjects)
            for label in labels}


def build_augmented_manifest(manifest: DatasetManifest, folds: FoldAssignment, cfg: RunConfig,
                             ae: KLAutoencoder, seed: int, fold: int | None = None) -> DatasetManifest:
    if cfg.augment.ratio == 0:
        return manifest
    ids = None if fold is None else folds.train_ids(fold)
    aug_seed = derive_seed(seed, 300) if fold is None else derive_seed(seed, 300, fold + 1)
    augmenters = fit_class_augmenters(manifest, cfg, ae, aug_seed, ids)
    return augment_training_folds(manifest, folds, cfg.augment.ratio, augmenters, derive_seed(aug_seed, 1),
                                  fold=fold, fnc_noise=cfg.augment.fnc_noise)


def build_model(spec: ExperimentSpec, cfg: RunConfig, ae: KLAutoencoder | None, seed: int) -> MultimodalClassifier:
    with seeded(seed):
        return MultimodalClassifier(
            spec.arch, spec.modalities, spec.lffm, cfg.data.dims, cfg.data.n_components,
            cfg.classifier.vit(), extractor=ae if spec.lffm else None,
            freeze_extractor=cfg.classifier.freeze_extractor,
            stem_channels=cfg.autoencoder.channels, latent_channels=cfg.autoencoder.latent_channels)


@dataclass
class SubjectTensors:
    ids: list[str]
    volume: torch.Tensor
    fnc: torch.Tensor
    label: torch.Tensor
    latent: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def inputs(self, idx=None):
        sel = (lambda t: t) if idx is None else (lambda t: t[idx])
        return sel(self.volume), sel(self.fnc), sel(self.latent) if self.latent is not None else None


def subject_tensors(records: list[SubjectRecord], model: MultimodalClassifier) -> SubjectTensors:
    volume = torch.from_numpy(np.stack([s.volume.voxels for s in records]))
    fnc = torch.from_numpy(np.stack([s.fnc.entries for s in records]))
    label = torch.tensor([s.label for s in records], dtype=torch.long)
    latent = None
    if model.use_lffm and model.freeze_extractor:
        latent = torch.cat([model.latents(volume[i:i + 64]) for i in range(0, len(records), 64)])
    return SubjectTensors([s.id for s in records], volume, fnc, label, latent)


def fold_split(manifest: DatasetManifest, folds: FoldAssignment, fold: int, augmented: bool):
    """Training and evaluation records for one fold, with the leakage audit."""
    if not 0 <= fold < folds.k:
        raise ConfigError(f"fold index {fold} outside 0..{folds.k - 1}")
    by_id = manifest.by_id()
    eval_ids = folds.eval_ids(fold)
    train_ids = folds.train_ids(fold)
    if augmented:
        train_ids += [s.id for s in manifest.augmented() if s.train_folds and fold in s.train_folds]
    leaked = set(eval_ids) & set(train_ids)
    if leaked:
        raise LeakageError(f"fold {fold}: {len(leaked)} evaluation subjects also in training")
    bad = [i for i in eval_ids if by_id[i].is_augmented]
    if bad:
        raise LeakageError(f"fold {fold}: augmented records {bad[:3]} in the evaluation set")
    return [by_id[i] for i in train_ids], [by_id[i] for i in eval_ids]


@torch.no_grad()
def predict(model: MultimodalClassifier, data: SubjectTensors, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(data), batch_size):
        idx = slice(start, start + batch_size)
        probs, _ = model.predict_proba(*data.inputs(idx))
        out.append(probs)
    return torch.cat(out).double().numpy()


def fit_classifier(model: MultimodalClassifier, data: SubjectTensors, cfg: RunConfig, warmup: bool, seed: int):
    """Train ``model`` in place with AdamW + warm-up/plateau schedule; returns the per-epoch curve."""
    c = cfg.classifier
    model.fit_input_norms(*data.inputs())
    opt = AdamW(model.trainable_parameters(), lr=c.lr, betas=(c.beta1, c.beta2), eps=c.eps,
                weight_decay=c.weight_decay)
    lr_state = LRState(base_lr=c.lr, warmup_epochs=c.warmup_epochs if warmup else 0,
                       factor=c.plateau_factor, patience=c.plateau_patience, threshold=c.plateau_threshold)
    gen = torch.Generator().manual_seed(seed)
    monitored = None
    curve = []
    for epoch in range(c.epochs):
        lr, lr_state = lr_at(epoch, monitored, lr_state)
        opt.set_lr(lr)
        model.train()
        order = torch.randperm(len(data), generator=gen)
        total = 0.0
        for start in range(0, len(data), c.batch_size):
            idx = order[start:start + c.batch_size]
            logits, _ = model(*data.inputs(idx))
            loss = F.cross_entropy(logits, data.label[idx])
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"classifier loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        monitored = total / len(data)
        curve.append({"epoch": epoch, "lr": lr, "loss": monitored})
    model.eval()
    return curve


def train_one_fold(manifest: DatasetManifest, folds: FoldAssignment, fold: int, spec: ExperimentSpec,
                   cfg: RunConfig, seed: int, ae: KLAutoencoder | None = None) -> FoldResult:
    train, evaluation = fold_split(manifest, folds, fold, spec.augmented)
    model = build_model(spec, cfg, ae, derive_seed(seed, 1))
    train_t = subject_tensors(train, model)
    eval_t = subject_tensors(evaluation, model)
    curve = fit_classifier(model, train_t, cfg, spec.warmup, derive_seed(seed, 2))
    probs = predict(model, eval_t)
    labels = eval_t.label.numpy()
    return FoldResult(fold, compute_accuracy(probs, labels), compute_auc(probs[:, 1], labels),
                      eval_t.ids, train_t.ids, probs, labels, curve, model)


def run_cv(manifest: DatasetManifest, spec: ExperimentSpec, cfg: RunConfig, seed: int,
           ae: KLAutoencoder | None = None, folds: FoldAssignment | None = None,
           keep_models: bool = False) -> MetricsReport:
    start = time.perf_counter()
    folds = folds or make_folds(manifest, cfg.k, seed)
    # a manifest that already carries augmented records is used as given
    prebuilt = bool(manifest.augmented())
    needs_ae = spec.lffm or (spec.augmented and cfg.augment.ratio > 0 and not prebuilt)
    if needs_ae and ae is None:
        ae, _ = pretrain_extractor(cfg, seed)
    if spec.augmented and not cfg.augment.refit_per_fold and not prebuilt:
        manifest = build_augmented_manifest(manifest, folds, cfg, ae, seed)
    results = []
    for fold in range(folds.k):
        fold_manifest = manifest
        if spec.augmented and cfg.augment.refit_per_fold and not prebuilt:
            fold_manifest = build_augmented_manifest(DatasetManifest(manifest.real(), manifest.seed, manifest.config),
                                                     folds, cfg, ae, seed, fold)
        res = train_one_fold(fold_manifest, folds, fold, spec, cfg, derive_seed(seed, fold), ae)
        log.info("%s fold %d: acc %.3f auc %.3f", spec.name, fold, res.accuracy, res.auc)
        if not keep_models:
            res.model = None
        results.append(res)
    return MetricsReport(spec.name, folds.k, [r.accuracy for r in results], [r.auc for r in results],
                         cfg.hash(), seed, results, time.perf_counter() - start)


def save_classifier(model: MultimodalClassifier, path, extra: dict | None = None):
    descriptor = model.descriptor()
    if model.extractor is not None:
        descriptor["extractor"] = model.extractor.descriptor.to_dict()
    return save_checkpoint(path, "classifier", descriptor, state_tensors(model), extra)


def load_classifier(path, stage: str | None = "train"):
    """Return ``(model, header)``."""
    d, tensors, header = load_checkpoint(path, "classifier", stage)
    extractor = KLAutoencoder(AEDescriptor.from_dict(d["extractor"])) if "extractor" in d else None
    model = MultimodalClassifier(d["arch"], d["modalities"], d["lffm"], d["volume_dims"], d["n_components"],
                                 ViTConfig.from_dict(d["vit"]), extractor=extractor,
                                 freeze_extractor=d["freeze_extractor"], stem_channels=d["stem_channels"],
                                 latent_channels=d["latent_channels"])
    load_state(model, tensors)
    model.eval()
    return model, header


# --------------------------------------------------------------------------- matrix

@dataclass
class MatrixResult:
    rows: list[dict]
    reports: dict[str, MetricsReport]
    failures: dict[str, str]
    augmented_ids: list[str]

    def audit_leakage(self) -> int:
        """Number of augmented ids found in any evaluation split (must be 0)."""
        aug = set(self.augmented_ids)
        return sum(len(aug & set(r.eval_ids)) for rep in self.reports.values() for r in rep.fold_results)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: row[k] for k in TABLE_COLUMNS})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"columns": TABLE_COLUMNS, "rows": self.rows,
                "reports": {name: rep.to_dict() for name, rep in self.reports.items()},
                "failures": self.failures}

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "matrix.csv").write_text(self.to_csv(), encoding="utf-8")
        dump_json(self.to_dict(), directory / "matrix.json")


def _run_row(args):
    torch.set_num_threads(1)
    return run_cv(*args)


def run_experiment_matrix(manifest: DatasetManifest, cfg: RunConfig, seed: int, ae: KLAutoencoder | None = None,
                          rows=MATRIX_ROWS, workers: int | None = None, keep_models=()) -> MatrixResult:
    """Run each preset row under one shared fold assignment, extractor and augmented set.

    Rows named in ``keep_models`` keep their trained fold models in the report.
    """
    folds = make_folds(manifest, cfg.k, seed)
    if ae is None and any(r.lffm or r.augmented for r in rows):
        ae, _ = pretrain_extractor(cfg, seed)
    shared = manifest
    if any(r.augmented for r in rows) and not cfg.augment.refit_per_fold and not manifest.augmented():
        shared = build_augmented_manifest(manifest, folds, cfg, ae, seed)
    workers = workers or int(os.environ.get("MULTIVIT2_WORKERS", "1"))
    jobs = [(shared, spec, cfg, seed, ae, folds, spec.name in keep_models) for spec in rows]
    outcomes = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_row, job) for job in jobs]
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except MultiViT2Error as exc:
                    outcomes.append(exc)
    else:
        for job in jobs:
            try:
                outcomes.append(run_cv(*job))
            except LeakageError:
                raise
            except MultiViT2Error as exc:
                outcomes.append(exc)
    table, reports, failures = [], {}, {}
    for spec, outcome in zip(rows, outcomes):
        row = spec.table_row()
        if isinstance(outcome, LeakageError):
            raise outcome
        if isinstance(outcome, Exception):
            failures[spec.name] = f"{type(outcome).__name__}: {outcome}"
            row.update({"Accuracy": "FAILED", "AUC": "FAILED"})
            log.error("row %s failed: %s", spec.name, outcome)
        else:
            reports[spec.name] = outcome
            row.update({"Accuracy": f"{outcome.mean_accuracy:.3f}", "AUC": f"{outcome.mean_auc:.3f}"})
        table.append(row)
    result = MatrixResult(table, reports, failures, [s.id for s in shared.augmented()])
    leaks = result.audit_leakage()
    if leaks:
        raise LeakageError(f"{leaks} augmented ids found in evaluation sets")
    return result
