"""Synthetic multi-class segmentation tasks with controllable source/target shift.

Images are composed of randomly placed blobs (axis-aligned rectangles and
ellipses) painted over a background class. Distribution shift between the
source and target collections has two orthogonal axes: the class prior used
to draw blob classes, and an additive offset of the per-class feature means.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gridio
from .errors import ConfigurationError, DataFormatError

PRIOR_TOL = 1e-9


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TaskSpec:
    """Everything needed to synthesize one labeled/target dataset pair."""

    num_classes: int
    grid_height: int
    grid_width: int
    feature_dim: int
    class_priors_source: tuple[float, ...]
    class_priors_target: tuple[float, ...]
    class_feature_means_source: tuple[tuple[float, ...], ...]
    class_feature_means_target: tuple[tuple[float, ...], ...]
    feature_noise_std: float
    blob_count_range: tuple[int, int]
    num_source_images: int
    num_target_images: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("grid_height", "grid_width", "feature_dim",
                     "num_source_images", "num_target_images"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.feature_noise_std > 0:
            raise ConfigurationError(
                f"feature_noise_std must be > 0, got {self.feature_noise_std}")
        lo, hi = self.blob_count_range
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"blob_count_range must satisfy 1 <= lo <= hi, got {lo, hi}")
        for name in ("class_priors_source", "class_priors_target"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (self.num_classes,):
                raise ConfigurationError(f"{name} must have length {self.num_classes}")
            if (p < 0).any():
                raise ConfigurationError(f"{name} has negative entries")
            if abs(p.sum() - 1.0) > PRIOR_TOL:
                raise ConfigurationError(f"{name} sums to {p.sum()!r}, expected 1 within {PRIOR_TOL}")
        for name in ("class_feature_means_source", "class_feature_means_target"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (self.num_classes, self.feature_dim):
                raise ConfigurationError(
                    f"{name} must have shape ({self.num_classes}, {self.feature_dim}), got {m.shape}")
            if not np.isfinite(m).all():
                raise ConfigurationError(f"{name} has non-finite entries")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "grid_height": self.grid_height,
            "grid_width": self.grid_width,
            "feature_dim": self.feature_dim,
            "class_priors_source": list(self.class_priors_source),
            "class_priors_target": list(self.class_priors_target),
            "class_feature_means_source": [list(r) for r in self.class_feature_means_source],
            "class_feature_means_target": [list(r) for r in self.class_feature_means_target],
            "feature_noise_std": self.feature_noise_std,
            "blob_count_range": list(self.blob_count_range),
            "num_source_images": self.num_source_images,
            "num_target_images": self.num_target_images,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        try:
            return cls(
                num_classes=int(d["num_classes"]),
                grid_height=int(d["grid_height"]),
                grid_width=int(d["grid_width"]),
                feature_dim=int(d["feature_dim"]),
                class_priors_source=tuple(float(x) for x in d["class_priors_source"]),
                class_priors_target=tuple(float(x) for x in d["class_priors_target"]),
                class_feature_means_source=tuple(
                    tuple(float(x) for x in row) for row in d["class_feature_means_source"]),
                class_feature_means_target=tuple(
                    tuple(float(x) for x in row) for row in d["class_feature_means_target"]),
                feature_noise_std=float(d["feature_noise_std"]),
                blob_count_range=(int(d["blob_count_range"][0]), int(d["blob_count_range"][1])),
                num_source_images=int(d["num_source_images"]),
                num_target_images=int(d["num_target_images"]),
            )
        except KeyError as e:
            raise ConfigurationError(f"task spec missing field {e.args[0]!r}") from None


@dataclass(frozen=True)
class SampleGrid:
    """One image: (H, W, feature_dim) float features plus a unique id."""

    features: np.ndarray
    id: str

    def __post_init__(self):
        if not np.isfinite(self.features).all():
            raise ConfigurationError(f"sample {self.id!r} has non-finite features")
        _freeze(self.features)


@dataclass(frozen=True)
class LabelGrid:
    """(H, W) integer class indices."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ConfigurationError(f"labels must be 2-D, got shape {self.labels.shape}")
        if self.labels.min() < 0:
            raise ConfigurationError("labels contain negative class indices")
        _freeze(self.labels)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature z-score statistics fitted on a training set."""

    mean: np.ndarray
    std: np.ndarray
    degenerate_features: tuple[int, ...] = ()  # features with zero spread, std forced to 1

    def __post_init__(self):
        _freeze(self.mean)
        _freeze(self.std)
        if not (np.isfinite(self.mean).all() and np.isfinite(self.std).all()):
            raise ConfigurationError("normalization stats must be finite")
        if (self.std <= 0).any():
            raise ConfigurationError("normalization std must be > 0")

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def invert(self, features: np.ndarray) -> np.ndarray:
        return features * self.std + self.mean


@dataclass(frozen=True)
class LabeledSet:
    """Aligned (SampleGrid, LabelGrid) pairs, optionally carrying z-score stats."""

    samples: tuple[tuple[SampleGrid, LabelGrid], ...]
    normalization_stats: NormalizationStats | None = None

    def __post_init__(self):
        for grid, lab in self.samples:
            if lab.labels.shape != grid.features.shape[:2]:
                raise ConfigurationError(f"sample {grid.id!r}: label/feature shape mismatch")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class TargetSet:
    """Unlabeled samples; hidden labels ride along for evaluation only.

    Training code must never read ``hidden_labels`` — the evaluation module
    is the single consumer (enforced by a source audit in the test suite).
    """

    samples: tuple[SampleGrid, ...]
    hidden_labels: tuple[LabelGrid, ...] | None = None

    def __post_init__(self):
        if self.hidden_labels is not None and len(self.hidden_labels) != len(self.samples):
            raise ConfigurationError("hidden_labels not aligned with samples")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FoldSplit:
    """Two-fold assignment of target samples."""

    fold_assignment: tuple[int, ...]
    seed: int

    def __post_init__(self):
        counts = [self.fold_assignment.count(0), self.fold_assignment.count(1)]
        if sum(counts) != len(self.fold_assignment) or abs(counts[0] - counts[1]) > 1:
            raise ConfigurationError(f"fold sizes {counts} differ by more than 1")

    def indices(self, fold: int) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.fold_assignment) if f == fold)


@dataclass(frozen=True)
class Blob:
    class_id: int
    shape: str  # "rect" | "ellipse"
    center: tuple[float, float]
    half_height: float
    half_width: float


def _draw_blobs(spec: TaskSpec, prior: np.ndarray, rng: np.random.Generator) -> list[Blob]:
    lo, hi = spec.blob_count_range
    count = int(rng.integers(lo, hi + 1))
    max_hh = max(1.0, spec.grid_height / 4)
    max_hw = max(1.0, spec.grid_width / 4)
    blobs = []
    for _ in range(count):
        class_id = int(rng.choice(spec.num_classes, p=prior))
        shape = "rect" if rng.random() < 0.5 else "ellipse"
        cy = rng.uniform(0, spec.grid_height)
        cx = rng.uniform(0, spec.grid_width)
        hh = rng.uniform(1.0, max_hh)
        hw = rng.uniform(1.0, max_hw)
        blobs.append(Blob(class_id, shape, (cy, cx), hh, hw))
    return blobs


def _paint(spec: TaskSpec, blobs: Sequence[Blob]) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.grid_height, 0:spec.grid_width]
    labels = np.zeros((spec.grid_height, spec.grid_width), dtype=np.int64)
    for b in blobs:
        dy = (yy + 0.5) - b.center[0]
        dx = (xx + 0.5) - b.center[1]
        if b.shape == "rect":
            inside = (np.abs(dy) <= b.half_height) & (np.abs(dx) <= b.half_width)
        else:
            inside = (dy / b.half_height) ** 2 + (dx / b.half_width) ** 2 <= 1.0
        labels[inside] = b.class_id
    return labels


def _render(spec: TaskSpec, labels: np.ndarray, means: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, spec.feature_noise_std,
                       size=(spec.grid_height, spec.grid_width, spec.feature_dim))
    return means[labels] + noise


def generate_task(spec: TaskSpec, seed: int) -> tuple[LabeledSet, TargetSet]:
    """Generate the labeled source set and the (hidden-label) target set.

    Pure function of (spec, seed): identical inputs give bit-identical data.
    """
    rng = np.random.default_rng(seed)
    means_src = np.asarray(spec.class_feature_means_source, dtype=float)
    means_tgt = np.asarray(spec.class_feature_means_target, dtype=float)
    prior_src = np.asarray(spec.class_priors_source, dtype=float)
    prior_tgt = np.asarray(spec.class_priors_target, dtype=float)
    # renormalize away accumulated float error so rng.choice accepts the vector
    prior_src = prior_src / prior_src.sum()
    prior_tgt = prior_tgt / prior_tgt.sum()

    source = []
    for i in range(spec.num_source_images):
        labels = _paint(spec, _draw_blobs(spec, prior_src, rng))
        feats = _render(spec, labels, means_src, rng)
        source.append((SampleGrid(feats, f"src-{i:03d}"), LabelGrid(labels)))

    tgt_samples, tgt_labels = [], []
    for i in range(spec.num_target_images):
        labels = _paint(spec, _draw_blobs(spec, prior_tgt, rng))
        feats = _render(spec, labels, means_tgt, rng)
        tgt_samples.append(SampleGrid(feats, f"tgt-{i:03d}"))
        tgt_labels.append(LabelGrid(labels))

    return (LabeledSet(tuple(source)),
            TargetSet(tuple(tgt_samples), tuple(tgt_labels)))


def zscore_fit_apply(
    train: LabeledSet,
    others: Sequence[LabeledSet | TargetSet] = (),
) -> tuple[LabeledSet, list[LabeledSet | TargetSet], NormalizationStats]:
    """Fit per-feature z-score stats on ``train`` and apply to all collections.

    Population standard deviation. A feature with zero spread gets std
    substituted by 1 and its index recorded in ``degenerate_features``.
    """
    if len(train) == 0:
        raise ConfigurationError("z-score fit requires a nonempty training set")
    stacked = np.concatenate([g.features.reshape(-1, g.features.shape[-1])
                              for g, _ in train.samples])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)  # population, ddof=0
    degenerate = tuple(int(i) for i in np.flatnonzero(std == 0.0))
    std = np.where(std == 0.0, 1.0, std)
    stats = NormalizationStats(mean, std, degenerate)

    def norm_grid(g: SampleGrid) -> SampleGrid:
        return SampleGrid(stats.apply(g.features), g.id)

    train_out = LabeledSet(
        tuple((norm_grid(g), lab) for g, lab in train.samples),
        normalization_stats=stats,
    )
    others_out: list[LabeledSet | TargetSet] = []
    for coll in others:
        if isinstance(coll, LabeledSet):
            others_out.append(LabeledSet(
                tuple((norm_grid(g), lab) for g, lab in coll.samples),
                normalization_stats=stats))
        elif isinstance(coll, TargetSet):
            others_out.append(TargetSet(
                tuple(norm_grid(g) for g in coll.samples), coll.hidden_labels))
        else:
            raise ConfigurationError(f"cannot normalize collection of type {type(coll).__name__}")
    return train_out, others_out, stats


def split_two_folds(target: TargetSet, seed: int) -> FoldSplit:
    """Deterministic two-fold split: shuffle by seed, assign alternately."""
    n = len(target)
    if n < 2:
        raise ConfigurationError(f"two-fold split needs >= 2 samples, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[perm] = np.arange(n) % 2
    return FoldSplit(tuple(int(a) for a in assignment), seed)


def subset_target(target: TargetSet, indices: Sequence[int]) -> TargetSet:
    """Target subset preserving hidden-label alignment."""
    hidden = None
    if target.hidden_labels is not None:
        hidden = tuple(target.hidden_labels[i] for i in indices)
    return TargetSet(tuple(target.samples[i] for i in indices), hidden)


def dataset_id(spec: TaskSpec, seed: int) -> str:
    payload = json.dumps({"spec": spec.to_dict(), "seed": seed}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def save_dataset(out_dir: str | Path, labeled: LabeledSet, target: TargetSet,
                 spec: TaskSpec, seed: int) -> str:
    """Write dataset directory (manifest + per-image binary grids); returns its id."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for grid, lab in labeled.samples:
        gridio.write_f32(out / f"features_{grid.id}.bin", grid.features)
        gridio.write_u8(out / f"labels_{grid.id}.bin", lab.labels)
    for i, grid in enumerate(target.samples):
        gridio.write_f32(out / f"features_{grid.id}.bin", grid.features)
        if target.hidden_labels is not None:
            gridio.write_u8(out / f"labels_{grid.id}.bin", target.hidden_labels[i].labels)
    manifest = {
        "format": "transeg-dataset",
        "version": 1,
        "dataset_id": dataset_id(spec, seed),
        "spec": spec.to_dict(),
        "seed": seed,
        "source_ids": [g.id for g, _ in labeled.samples],
        "target_ids": [g.id for g in target.samples],
        "has_hidden_labels": target.hidden_labels is not None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest["dataset_id"]


def load_dataset(path: str | Path) -> tuple[LabeledSet, TargetSet, TaskSpec, int]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "transeg-dataset":
        raise DataFormatError(f"{manifest_path}: not a dataset manifest")
    spec = TaskSpec.from_dict(manifest["spec"])

    def check_labels(labels: np.ndarray, sid: str) -> np.ndarray:
        if labels.max() >= spec.num_classes:
            raise DataFormatError(f"{sid}: label >= num_classes={spec.num_classes}")
        return labels

    source = []
    for sid in manifest["source_ids"]:
        feats = gridio.read_f32(path / f"features_{sid}.bin")
        labels = check_labels(gridio.read_u8(path / f"labels_{sid}.bin"), sid)
        source.append((SampleGrid(feats, sid), LabelGrid(labels)))
    tgt_samples, tgt_labels = [], []
    for sid in manifest["target_ids"]:
        tgt_samples.append(SampleGrid(gridio.read_f32(path / f"features_{sid}.bin"), sid))
        if manifest["has_hidden_labels"]:
            tgt_labels.append(LabelGrid(check_labels(gridio.read_u8(path / f"labels_{sid}.bin"), sid)))
    target = TargetSet(tuple(tgt_samples), tuple(tgt_labels) if tgt_labels else None)
    return LabeledSet(tuple(source)), target, spec, int(manifest["seed"])
