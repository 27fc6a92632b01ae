"""Domain types, file import/export, fold assignment and the synthetic cohort generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .container import dump_json, read_array, write_array
from .errors import DataError

DEFAULT_DIMS = (24, 28, 24)
DEFAULT_COMPONENTS = 16
SYMMETRY_TOL = 1e-6


class Provenance(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic-generated"
    AUGMENTED = "ldm-augmented"


@dataclass(frozen=True, eq=False)
class StructuralVolume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise DataError("volume contains NaN or Inf")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be 3 positive reals, got {self.spacing}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass(frozen=True, eq=False)
class FNCMatrix:
    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=np.float32)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DataError(f"FNC matrix must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DataError("FNC matrix contains NaN or Inf")
        if np.max(np.abs(m - m.T)) > SYMMETRY_TOL:
            raise DataError("FNC matrix is not symmetric")
        if m.min() < -1.0 or m.max() > 1.0:
            raise DataError(f"FNC entries outside [-1, 1] (range {m.min():.4g}..{m.max():.4g})")
        if np.max(np.abs(np.diag(m) - 1.0)) > SYMMETRY_TOL:
            raise DataError("FNC diagonal must equal 1")
        object.__setattr__(self, "entries", m)

    @property
    def n_components(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    id: str
    volume: StructuralVolume
    fnc: FNCMatrix
    label: int
    provenance: Provenance
    site: str = "site-0"
    # augmented records only: folds whose training phase may use this record
    train_folds: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"{self.id}: label must be 0 or 1, got {self.label}")
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if self.train_folds is not None:
            object.__setattr__(self, "train_folds", tuple(int(f) for f in self.train_folds))

    @property
    def is_augmented(self) -> bool:
        return self.provenance is Provenance.AUGMENTED


@dataclass(eq=False)
class DatasetManifest:
    subjects: list[SubjectRecord]
    seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("subject ids must be unique")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def real(self) -> list[SubjectRecord]:
        return [s for s in self.subjects if not s.is_augmented]

    def augmented(self) -> list[SubjectRecord]:
        return [s for s in self.subjects if s.is_augmented]

    def by_id(self) -> dict[str, SubjectRecord]:
        return {s.id: s for s in self.subjects}

    def with_subjects(self, extra: list[SubjectRecord]) -> "DatasetManifest":
        return DatasetManifest(list(self.subjects) + list(extra), self.seed, dict(self.config))


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: dict[str, int]

    def eval_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f != fold]

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.assignment.values():
            counts[f] += 1
        return counts


# --------------------------------------------------------------------------- files

def write_volume(v: StructuralVolume, path: str | Path) -> Path:
    return write_array(v.voxels, path, "volume", {"spacing": list(v.spacing)})


def load_volume(path: str | Path, expected_dims: tuple[int, int, int] | None = None) -> StructuralVolume:
    voxels, header = read_array(path, kind="volume")
    if voxels.ndim != 3:
        raise DataError(f"{path}: volume header declares {voxels.ndim} dims")
    if expected_dims is not None and tuple(voxels.shape) != tuple(expected_dims):
        raise DataError(f"{path}: dims {voxels.shape} do not match expected {tuple(expected_dims)}")
    if not np.all(np.isfinite(voxels)):
        raise DataError(f"{path}: volume contains NaN or Inf")
    return StructuralVolume(voxels, tuple(header.get("spacing", (1.5, 1.5, 1.5))))


def write_fnc(f: FNCMatrix, path: str | Path) -> Path:
    return write_array(f.entries, path, "fnc")


def load_fnc(path: str | Path, n_components: int | None = None) -> FNCMatrix:
    m, _ = read_array(path, kind="fnc")
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"{path}: FNC must be square, got {m.shape}")
    if n_components is not None and m.shape[0] != n_components:
        raise DataError(f"{path}: expected {n_components}x{n_components} FNC, got {m.shape}")
    return FNCMatrix(symmetrize(m))


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Absorb float round-off asymmetry; genuinely asymmetric input is rejected."""
    m = np.asarray(m, dtype=np.float64)
    if np.max(np.abs(m - m.T)) > SYMMETRY_TOL:
        raise DataError(f"asymmetry {np.max(np.abs(m - m.T)):.3g} exceeds {SYMMETRY_TOL}")
    return ((m + m.T) / 2.0).astype(np.float32)


def normalize_volume(v: StructuralVolume) -> StructuralVolume:
    lo, hi = float(v.voxels.min()), float(v.voxels.max())
    if not hi > lo:
        raise DataError("cannot min-max normalize a constant volume")
    scaled = (v.voxels.astype(np.float64) - lo) / (hi - lo)
    return StructuralVolume(np.clip(scaled, 0.0, 1.0).astype(np.float32), v.spacing)


def write_manifest(manifest: DatasetManifest, directory: str | Path) -> Path:
    """Write ``manifest.json`` plus one volume/FNC container pair per subject."""
    directory = Path(directory)
    (directory / "subjects").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in manifest.subjects:
        vpath = Path("subjects") / f"{s.id}_volume.json"
        fpath = Path("subjects") / f"{s.id}_fnc.json"
        write_volume(s.volume, directory / vpath)
        write_fnc(s.fnc, directory / fpath)
        entries.append({
            "id": s.id,
            "label": s.label,
            "provenance": s.provenance.value,
            "site": s.site,
            "train_folds": list(s.train_folds) if s.train_folds is not None else None,
            "volume": vpath.as_posix(),
            "fnc": fpath.as_posix(),
        })
    path = directory / "manifest.json"
    dump_json({"format": "multivit2-manifest", "version": 1, "seed": manifest.seed,
               "config": manifest.config, "subjects": entries}, path)
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise DataError(f"no manifest at {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != "multivit2-manifest":
        raise DataError(f"{path}: not a manifest")
    root = path.parent
    subjects = []
    for e in doc["subjects"]:
        subjects.append(SubjectRecord(
            id=e["id"],
            volume=load_volume(root / e["volume"]),
            fnc=load_fnc(root / e["fnc"]),
            label=int(e["label"]),
            provenance=Provenance(e["provenance"]),
            site=e.get("site", "site-0"),
            train_folds=tuple(e["train_folds"]) if e.get("train_folds") is not None else None,
        ))
    return DatasetManifest(subjects, int(doc["seed"]), doc.get("config", {}))


# --------------------------------------------------------------------------- folds

def make_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Stratified k-fold assignment of every non-augmented subject.

    Each class is shuffled and dealt round-robin; the second class continues
    dealing where the first stopped, which keeps total fold sizes within one.
    """
    real = manifest.real()
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    cursor = 0
    for label in (0, 1):
        members = [s.id for s in real if s.label == label]
        if len(members) < k:
            raise DataError(f"class {label} has {len(members)} subjects, need at least k={k}")
        order = rng.permutation(len(members))
        for j, idx in enumerate(order):
            assignment[members[idx]] = (cursor + j) % k
        cursor = (cursor + len(members)) % k
    # keep manifest order for deterministic iteration
    return FoldAssignment(k, {s.id: assignment[s.id] for s in real})


# --------------------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, int, int] = DEFAULT_DIMS
    n_components: int = DEFAULT_COMPONENTS
    roi_center: tuple[float, float, float] | None = None
    roi_radii: tuple[float, float, float] | None = None
    volume_shift: float = 0.6
    fnc_shift: float = 0.6
    field_std: float = 0.06
    voxel_noise: float = 0.03
    timepoints: int = 120

    def roi(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        d, h, w = self.dims
        center = self.roi_center or (d / 3.0, h * 0.36, w / 2.0)
        radii = self.roi_radii or (min(self.dims) / 7.0,) * 3
        return tuple(float(c) for c in center), tuple(float(r) for r in radii)

    def to_dict(self) -> dict:
        center, radii = self.roi()
        return {"dims": list(self.dims), "n_components": self.n_components,
                "roi_center": list(center), "roi_radii": list(radii),
                "volume_shift": self.volume_shift, "fnc_shift": self.fnc_shift,
                "field_std": self.field_std, "voxel_noise": self.voxel_noise,
                "timepoints": self.timepoints}


def ellipsoid_mask(dims, center, radii) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def roi_mask(spec: SynthSpec) -> np.ndarray:
    center, radii = spec.roi()
    return ellipsoid_mask(spec.dims, center, radii)


def fnc_block(n_components: int) -> tuple[slice, slice]:
    """Between-domain block carrying the planted FNC signal."""
    half = n_components // 2
    return slice(0, half), slice(half, n_components)


def synthesize_dataset(n: int, mode: str = "additive", dims=DEFAULT_DIMS, n_components: int = DEFAULT_COMPONENTS,
                       seed: int = 0, spec: SynthSpec | None = None, id_prefix: str = "sub") -> DatasetManifest:
    """Balanced synthetic cohort with a planted class signal.

    ``additive``: the label shifts the ROI mean intensity and the FNC block
    offset, so either modality alone is informative. ``xor``: two hidden
    +/-1 factors a (volume ROI) and b (FNC block) with label = [a*b == 1];
    each factor is independent of the label, so neither modality alone is.
    """
    if mode not in ("additive", "xor"):
        raise DataError(f"unknown generator mode {mode!r}")
    if n < 10 or n % 2:
        raise DataError(f"n must be an even count >= 10, got {n}")
    spec = spec or SynthSpec(dims=tuple(dims), n_components=n_components)
    center, radii = spec.roi()
    for c, r, size in zip(center, radii, spec.dims):
        if c - r < 0 or c + r > size - 1:
            raise DataError(f"ROI (center {center}, radii {radii}) does not fit dims {spec.dims}")
    if spec.n_components < 2:
        raise DataError("need at least 2 FNC components")

    seeds = np.random.SeedSequence(seed).spawn(n + 1)
    rng = np.random.default_rng(seeds[0])
    labels = rng.permutation(np.repeat([0, 1], n // 2))
    if mode == "additive":
        vol_factor = 2 * labels - 1
        fnc_factor = 2 * labels - 1
    else:
        vol_factor = rng.choice([-1, 1], size=n)
        fnc_factor = np.where(labels == 1, vol_factor, -vol_factor)
    sites = rng.integers(0, 3, size=n)

    brain = ellipsoid_mask(spec.dims, [(s - 1) / 2 for s in spec.dims], [s / 2 - 1.5 for s in spec.dims])
    roi = roi_mask(spec)
    subjects = []
    for i in range(n):
        srng = np.random.default_rng(seeds[i + 1])
        volume = _synth_volume(srng, spec, brain, roi, vol_factor[i] * spec.volume_shift / 2)
        fnc = _synth_fnc(srng, spec, fnc_factor[i] * spec.fnc_shift / 2)
        subjects.append(SubjectRecord(
            id=f"{id_prefix}-{i:04d}", volume=StructuralVolume(volume), fnc=FNCMatrix(fnc),
            label=int(labels[i]), provenance=Provenance.SYNTHETIC, site=f"site-{sites[i]}",
        ))
    config = {"generator": mode, "n": n, **spec.to_dict()}
    return DatasetManifest(subjects, int(seed), config)


def _synth_volume(rng, spec: SynthSpec, brain, roi, shift: float) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal(spec.dims), sigma=2.0)
    field *= spec.field_std / field.std()
    gm = 0.45 + rng.normal(0.0, 0.02)
    vol = np.where(brain, gm + field, 0.05)
    vol = vol + rng.normal(0.0, spec.voxel_noise, spec.dims)
    vol[roi] += shift
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def _synth_fnc(rng, spec: SynthSpec, shift: float) -> np.ndarray:
    c = spec.n_components
    domain = (np.arange(c) >= c // 2).astype(int)
    shared = rng.standard_normal((2, spec.timepoints))
    ts = rng.standard_normal((c, spec.timepoints)) + 0.8 * shared[domain]
    m = np.corrcoef(ts)
    rows, cols = fnc_block(c)
    m[rows, cols] += shift
    m[cols, rows] += shift
    m = np.clip((m + m.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(m, 1.0)
    return m.astype(np.float32)


def roi_mean(volume: StructuralVolume, spec: SynthSpec) -> float:
    return float(volume.voxels[roi_mask(spec)].mean())


def point_biserial(values, labels) -> float:
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if values.std() == 0 or labels.std() == 0:
        return 0.0
    return float(np.corrcoef(values, labels)[0, 1])


def manifests_identical(a: DatasetManifest, b: DatasetManifest) -> bool:
    if a.seed != b.seed or a.config != b.config or a.ids != b.ids:
        return False
    for x, y in zip(a.subjects, b.subjects):
        if (x.label, x.provenance, x.site, x.train_folds) != (y.label, y.provenance, y.site, y.train_folds):
            return False
        if x.volume.voxels.tobytes() != y.volume.voxels.tobytes():
            return False
        if x.fnc.entries.tobytes() != y.fnc.entries.tobytes():
            return False
    return True


def ceil_ratio(ratio: float, count: int) -> int:
    # guard against 0.5*100 = 50.00000001 style float noise
    return int(math.ceil(round(ratio * count, 9)))
