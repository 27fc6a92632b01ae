"""Stage-oriented command line: synth-data, pretrain-ae, train-ldm, augment, train, evaluate, saliency, matrix.

Every stage writes into ``<out>/<stage>/`` together with a ``stage.json``
holding the exact RunConfig and its hash. Downstream stages refuse upstream
artifacts produced under a different config hash unless
``--allow-config-mismatch`` is given.

Exit codes: 0 success, 1 usage/config error, 2 missing upstream artifact,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import training as tr
from .augmentation import augment_training_folds, load_augmenter, save_augmenter
from .autoencoder import load_autoencoder, save_autoencoder
from .config import RunConfig, load_config
from .container import dump_json
from .data import DatasetManifest, make_folds, read_manifest, roi_mask, synthesize_dataset, write_manifest
from .errors import ConfigError, MissingArtifactError, MultiViT2Error
from .metrics import compute_accuracy, compute_auc
from .saliency import export_overlay, roi_summary, subject_saliency

log = logging.getLogger("multivit2")

STAGE_DIRS = {"synth-data": "data", "pretrain-ae": "ae", "train-ldm": "ldm", "augment": "augment",
              "train": "train", "evaluate": "evaluate", "saliency": "saliency", "matrix": "matrix"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for missing artifacts here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class Context:
    def __init__(self, cfg: RunConfig, allow_mismatch: bool = False):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.hash = cfg.hash()
        self.allow_mismatch = allow_mismatch

    def stage_dir(self, stage: str) -> Path:
        return self.out / STAGE_DIRS[stage]

    def begin(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        dump_json({"stage": stage, "config_hash": self.hash, "run_config": self.cfg.to_dict()}, d / "stage.json")
        return d

    def require(self, stage: str, name: str) -> Path:
        """Path of an upstream artifact, after checking it exists and matches the config hash."""
        d = self.stage_dir(stage)
        path = d / name
        if not path.exists() or not (d / "stage.json").is_file():
            raise MissingArtifactError(stage, path)
        upstream = json.loads((d / "stage.json").read_text(encoding="utf-8"))["config_hash"]
        if upstream != self.hash and not self.allow_mismatch:
            raise ConfigError(f"stage '{stage}' was produced under config hash {upstream}, current is {self.hash}; "
                              "pass --allow-config-mismatch to override")
        return path

    @property
    def extra(self) -> dict:
        return {"config_hash": self.hash, "seed": self.cfg.seed}


# --------------------------------------------------------------------------- stages

def _data(ctx: Context) -> DatasetManifest:
    return read_manifest(ctx.require("synth-data", "manifest.json"))


def _ae(ctx: Context):
    return load_autoencoder(ctx.require("pretrain-ae", "autoencoder.json"), stage="pretrain-ae")[0]


def _spec(name: str) -> tr.ExperimentSpec:
    if name not in tr.PRESETS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {sorted(tr.PRESETS)}")
    return tr.PRESETS[name]


def cmd_synth_data(ctx: Context, args) -> None:
    d = ctx.cfg.data
    manifest = synthesize_dataset(d.n, d.mode, spec=d.synth_spec(), seed=ctx.cfg.seed)
    out = ctx.begin("synth-data")
    path = write_manifest(manifest, out)
    print(path)


def cmd_pretrain_ae(ctx: Context, args) -> None:
    ae, curve = tr.pretrain_extractor(ctx.cfg, ctx.cfg.seed)
    out = ctx.begin("pretrain-ae")
    save_autoencoder(ae, out / "autoencoder.json", ctx.extra)
    dump_json({"curve": curve, **ctx.extra}, out / "loss_curve.json")
    print(out / "autoencoder.json")


def _ldm_names(cfg: RunConfig) -> list[tuple[int | None, int, str]]:
    folds = range(cfg.k) if cfg.augment.refit_per_fold else [None]
    return [(f, label, f"label{label}.json" if f is None else f"fold{f}_label{label}.json")
            for f in folds for label in (0, 1)]


def cmd_train_ldm(ctx: Context, args) -> None:
    ae = _ae(ctx)
    manifest = _data(ctx)
    cfg, seed = ctx.cfg, ctx.cfg.seed
    folds = make_folds(manifest, cfg.k, seed)
    out = ctx.begin("train-ldm")
    for fold, label, name in _ldm_names(cfg):
        aug_seed = tr.derive_seed(seed, 300) if fold is None else tr.derive_seed(seed, 300, fold + 1)
        ids = None if fold is None else folds.train_ids(fold)
        aug = tr.fit_class_augmenters(manifest, cfg, ae, aug_seed, ids, labels=(label,))[label]
        save_augmenter(aug, out / name, ctx.extra)
        print(out / name)


def cmd_augment(ctx: Context, args) -> None:
    cfg, seed = ctx.cfg, ctx.cfg.seed
    ae = _ae(ctx)
    manifest = _data(ctx)
    folds = make_folds(manifest, cfg.k, seed)
    augmenters: dict = {}
    for fold, label, name in _ldm_names(cfg):
        augmenters.setdefault(fold, {})[label] = load_augmenter(ctx.require("train-ldm", name), ae)[0]
    generated = []
    for fold, pair in augmenters.items():
        aug_seed = tr.derive_seed(seed, 300) if fold is None else tr.derive_seed(seed, 300, fold + 1)
        part = augment_training_folds(DatasetManifest(manifest.real(), manifest.seed, manifest.config), folds,
                                      cfg.augment.ratio, pair, tr.derive_seed(aug_seed, 1), fold=fold,
                                      fnc_noise=cfg.augment.fnc_noise)
        generated += part.augmented()
    out = ctx.begin("augment")
    path = write_manifest(manifest.with_subjects(generated), out)
    print(path)


def _train_manifest(ctx: Context, spec: tr.ExperimentSpec) -> DatasetManifest:
    if spec.augmented and ctx.cfg.augment.ratio > 0:
        return read_manifest(ctx.require("augment", "manifest.json"))
    return _data(ctx)


def cmd_train(ctx: Context, args) -> None:
    spec = _spec(args.experiment)
    cfg, seed = ctx.cfg, ctx.cfg.seed
    manifest = _train_manifest(ctx, spec)
    ae = _ae(ctx) if spec.lffm else None
    folds = make_folds(manifest, cfg.k, seed)
    report = tr.run_cv(manifest, spec, cfg, seed, ae, folds, keep_models=True)
    out = ctx.begin("train") / spec.name
    for res in report.fold_results:
        tr.save_classifier(res.model, out / f"fold{res.fold}.json",
                           {**ctx.extra, "experiment": spec.name, "fold": res.fold, "curve": res.curve})
    report.write(out)
    print(out / "metrics.json")


def _fold_models(ctx: Context, name: str):
    for fold in range(ctx.cfg.k):
        model, header = tr.load_classifier(ctx.require("train", f"{name}/fold{fold}.json"), stage="train")
        yield fold, model, header


def _eval_tensors(manifest: DatasetManifest, folds, fold: int, model):
    by_id = manifest.by_id()
    records = [by_id[i] for i in folds.eval_ids(fold)]
    return records, tr.subject_tensors(records, model)


def cmd_evaluate(ctx: Context, args) -> None:
    spec = _spec(args.experiment)
    cfg, seed = ctx.cfg, ctx.cfg.seed
    manifest = _data(ctx)
    folds = make_folds(manifest, cfg.k, seed)
    accs, aucs, hashes = [], [], set()
    for fold, model, header in _fold_models(ctx, spec.name):
        hashes.add(header["extra"]["config_hash"])
        _, data = _eval_tensors(manifest, folds, fold, model)
        probs = tr.predict(model, data)
        labels = data.label.numpy()
        accs.append(compute_accuracy(probs, labels))
        aucs.append(compute_auc(probs[:, 1], labels))
    report = tr.MetricsReport(spec.name, cfg.k, accs, aucs, hashes.pop() if len(hashes) == 1 else ctx.hash, seed)
    out = ctx.begin("evaluate") / spec.name
    report.write(out)
    print(out / "metrics.json")


def cmd_saliency(ctx: Context, args) -> None:
    spec = _spec(args.experiment)
    cfg, seed = ctx.cfg, ctx.cfg.seed
    manifest = _data(ctx)
    folds = make_folds(manifest, cfg.k, seed)
    out = ctx.begin("saliency") / spec.name
    all_sals, exported = [], 0
    for fold, model, _ in _fold_models(ctx, spec.name):
        records, data = _eval_tensors(manifest, folds, fold, model)
        sals = subject_saliency(model, *data.inputs())
        all_sals += sals
        for rec, sal in zip(records, sals):
            if exported < args.max_subjects:
                export_overlay(rec.volume, sal, out / rec.id, args.slices,
                               {"subject": rec.id, "fold": fold, **ctx.extra})
                exported += 1
    summary = {**roi_summary(all_sals, roi_mask(cfg.data.synth_spec())), **ctx.extra}
    dump_json(summary, out / "summary.json")
    print(out / "summary.json")


def cmd_matrix(ctx: Context, args) -> None:
    cfg, seed = ctx.cfg, ctx.cfg.seed
    manifest = _data(ctx)
    ae_path = ctx.stage_dir("pretrain-ae") / "autoencoder.json"
    ae = _ae(ctx) if ae_path.exists() else None
    aug_path = ctx.stage_dir("augment") / "manifest.json"
    if aug_path.exists():
        manifest = read_manifest(ctx.require("augment", "manifest.json"))
    rows = tr.MATRIX_ROWS + ((tr.BASELINE1_FNC,) if args.include_fnc_baseline else ())
    result = tr.run_experiment_matrix(manifest, cfg, seed, ae, rows=rows)
    out = ctx.begin("matrix")
    result.write(out)
    doc = json.loads((out / "matrix.json").read_text(encoding="utf-8"))
    dump_json({**doc, "config_hash": ctx.hash, "run_config": cfg.to_dict()}, out / "matrix.json")
    print(out / "matrix.csv")


COMMANDS = {"synth-data": cmd_synth_data, "pretrain-ae": cmd_pretrain_ae, "train-ldm": cmd_train_ldm,
            "augment": cmd_augment, "train": cmd_train, "evaluate": cmd_evaluate, "saliency": cmd_saliency,
            "matrix": cmd_matrix}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--preset", choices=["desk", "paper"], help="preset profile (default: from config, else desk)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--allow-config-mismatch", action="store_true",
                        help="accept upstream artifacts produced under a different config hash")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="multivit2", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train", "evaluate", "saliency"):
            p.add_argument("--experiment", default="MultiViT2", help="experiment preset name")
        if name == "saliency":
            p.add_argument("--slices", type=int, default=8, help="axial slices per overlay")
            p.add_argument("--max-subjects", type=int, default=4, help="subjects to export overlays for")
        if name == "matrix":
            p.add_argument("--include-fnc-baseline", action="store_true", help="add the non-table FNC-only row")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"multivit2: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = load_config(args.config, args.preset, overrides)
        torch.set_num_threads(1)
        COMMANDS[args.command](Context(cfg, args.allow_config_mismatch), args)
    except MultiViT2Error as exc:
        print(f"multivit2 {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"multivit2 {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
