"""Self-training: confidence-thresholded pseudo-labels and model ensembles.

Two phases: models trained on the labeled set produce posteriors for the
target set; pixels predicted with confidence strictly above the threshold
become pseudo-labels; fresh models are then trained on the labeled set plus
the pseudo-labeled target pixels. Predictions the phase-2 models make on the
target set are the transductive output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gridio, learner
from .dataspace import LabeledSet, TargetSet
from .errors import ConfigurationError, DataFormatError
from .learner import ClassifierSpec, TrainConfig

DEFAULT_THRESHOLD_SWEEP = (0.0, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


def confidence(posterior: np.ndarray) -> np.ndarray:
    """Max class posterior; scalar vector in, scalar out, grid in, grid out."""
    return np.asarray(posterior, dtype=float).max(axis=-1)


@dataclass(frozen=True)
class PseudoLabelSet:
    """Per-pixel argmax labels plus the confidence-gated inclusion mask.

    Labels are defined for every pixel; the mask is True exactly where
    confidence exceeded the threshold (strict), so lowering t only ever
    grows the included set. Argmax ties break to the lowest class index.
    """

    labels: tuple[np.ndarray, ...]
    masks: tuple[np.ndarray, ...]
    threshold: float
    source: str  # "single-model" | "ensemble"
    source_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.labels) != len(self.masks):
            raise ConfigurationError("pseudo-label/mask lists differ in length")
        for lab, m in zip(self.labels, self.masks):
            if lab.shape != m.shape:
                raise ConfigurationError("pseudo-label/mask shape mismatch")

    @property
    def masked_fraction(self) -> float:
        total = sum(m.size for m in self.masks)
        kept = sum(int(m.sum()) for m in self.masks)
        return 1.0 - kept / total if total else 0.0


def make_pseudolabels(
    posteriors: Sequence[np.ndarray],
    t: float,
    source: str = "single-model",
    source_ids: Sequence[str] = (),
) -> PseudoLabelSet:
    """Threshold posterior grids into a PseudoLabelSet (include iff confidence > t)."""
    if not 0.0 <= t <= 1.0:
        raise ConfigurationError(f"threshold must be in [0, 1], got {t}")
    labels, masks = [], []
    for post in posteriors:
        p = np.asarray(post, dtype=float)
        labels.append(p.argmax(axis=-1))
        masks.append(confidence(p) > t)
    return PseudoLabelSet(tuple(labels), tuple(masks), t, source, tuple(source_ids))


@dataclass(frozen=True)
class Ensemble:
    """K independently trained parameter vectors sharing one architecture."""

    spec: ClassifierSpec
    members: tuple[np.ndarray, ...]
    seeds: tuple[int, ...]

    def __post_init__(self):
        if len(self.members) < 1:
            raise ConfigurationError("ensemble needs at least one member")
        if len(self.members) != len(self.seeds):
            raise ConfigurationError("members/seeds differ in length")
        for m in self.members:
            if m.shape != (self.spec.param_count(),):
                raise ConfigurationError("member parameter vector does not match spec")

    @property
    def size(self) -> int:
        return len(self.members)


def train_ensemble(
    spec: ClassifierSpec,
    labeled: LabeledSet,
    objective: learner.Objective,
    base_config: TrainConfig,
    seeds: Sequence[int],
) -> Ensemble:
    """K = len(seeds) independent runs; the seed drives both init and batch order."""
    seeds = tuple(int(s) for s in seeds)
    if len(set(seeds)) != len(seeds):
        raise ConfigurationError(f"ensemble seeds must be distinct, got {seeds}")
    members = []
    for s in seeds:
        cfg = TrainConfig(**{**base_config.to_dict(), "seed": s})
        params = learner.init_params(spec, s, cfg.init_scale)
        members.append(learner.train(spec, params, labeled, objective, cfg))
    return Ensemble(spec, tuple(members), seeds)


def ensemble_predict(ensemble: Ensemble, sample) -> np.ndarray:
    """Per-pixel arithmetic mean of member posterior grids."""
    out = learner.forward(ensemble.spec, ensemble.members[0], sample)
    for params in ensemble.members[1:]:
        out = out + learner.forward(ensemble.spec, params, sample)
    return out / ensemble.size


def predict_target(ensemble: Ensemble, target: TargetSet) -> tuple[np.ndarray, ...]:
    return tuple(ensemble_predict(ensemble, g) for g in target.samples)


@dataclass(frozen=True)
class PipelineResult:
    source_models: Ensemble
    pseudolabels: PseudoLabelSet
    retrained: Ensemble
    transductive: tuple[np.ndarray, ...]  # phase-2 posterior grid per target sample


def self_train_pipeline(
    spec: ClassifierSpec,
    labeled: LabeledSet,
    target: TargetSet,
    t: float,
    config: TrainConfig,
    source_seeds: Sequence[int],
    retrain_seeds: Sequence[int],
    source_models: Ensemble | None = None,
) -> PipelineResult:
    """Run both self-training phases and return the transductive predictions.

    len(source_seeds) == 1 gives the single-model pseudo-label source,
    larger gives an ensemble source; same convention for retrain_seeds.
    Pass ``source_models`` to reuse already-trained phase-1 models (their
    seeds take precedence over source_seeds). With an ensemble source,
    t=0 and a single retrain model this is distillation of the ensemble.
    """
    if source_models is None:
        source_models = train_ensemble(spec, labeled, learner.Supervised(), config, source_seeds)
    posteriors = predict_target(source_models, target)
    source_kind = "single-model" if source_models.size == 1 else "ensemble"
    pseudo = make_pseudolabels(posteriors, t, source_kind,
                               tuple(f"seed-{s}" for s in source_models.seeds))
    objective = learner.SupervisedPlusPseudo(target, pseudo.labels, pseudo.masks)
    retrained = train_ensemble(spec, labeled, objective, config, retrain_seeds)
    transductive = predict_target(retrained, target)
    return PipelineResult(source_models, pseudo, retrained, transductive)


# --- persistence ------------------------------------------------------------

def save_pseudolabels(out_dir: str | Path, pseudo: PseudoLabelSet,
                      sample_ids: Sequence[str]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(sample_ids) != len(pseudo.labels):
        raise ConfigurationError("sample_ids not aligned with pseudo-labels")
    for sid, lab, m in zip(sample_ids, pseudo.labels, pseudo.masks):
        gridio.write_u8(out / f"pseudolabels_{sid}.bin", lab)
        gridio.write_u8(out / f"pseudomask_{sid}.bin", m.astype(np.uint8))
    manifest = {
        "format": "transeg-pseudolabels",
        "version": 1,
        "threshold": pseudo.threshold,
        "source": pseudo.source,
        "source_ids": list(pseudo.source_ids),
        "sample_ids": list(sample_ids),
        "masked_fraction": pseudo.masked_fraction,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_pseudolabels(path: str | Path) -> tuple[PseudoLabelSet, list[str]]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "transeg-pseudolabels":
        raise DataFormatError(f"{path}: not a pseudo-label manifest")
    labels, masks = [], []
    for sid in manifest["sample_ids"]:
        labels.append(gridio.read_u8(path / f"pseudolabels_{sid}.bin"))
        masks.append(gridio.read_u8(path / f"pseudomask_{sid}.bin").astype(bool))
    pseudo = PseudoLabelSet(tuple(labels), tuple(masks), float(manifest["threshold"]),
                            manifest["source"], tuple(manifest["source_ids"]))
    return pseudo, list(manifest["sample_ids"])
