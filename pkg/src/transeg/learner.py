"""Probabilistic per-pixel classifier with plain mini-batch SGD.

The classifier consumes the r x r patch of feature vectors centered on a
pixel (zero-padded at borders) and emits a class posterior via softmax.
Losses use natural log; the calibration module reports entropies in bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gridio
from .dataspace import LabeledSet, SampleGrid, TargetSet
from .errors import ConfigurationError, DataFormatError, NumericError, TrainingDiverged

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class ClassifierSpec:
    """Architecture of the pixel classifier.

    ``feature_dim`` is part of the spec because it fixes the parameter
    layout (input width = receptive_field**2 * feature_dim).
    """

    kind: str  # "softmax-linear" | "mlp"
    num_classes: int
    feature_dim: int
    receptive_field: int = 3
    hidden_widths: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("softmax-linear", "mlp"):
            raise ConfigurationError(f"unknown classifier kind {self.kind!r}")
        if self.kind == "softmax-linear" and self.hidden_widths:
            raise ConfigurationError("softmax-linear takes no hidden widths")
        if self.kind == "mlp" and not self.hidden_widths:
            raise ConfigurationError("mlp requires at least one hidden width")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.receptive_field < 1 or self.receptive_field % 2 == 0:
            raise ConfigurationError(
                f"receptive_field must be odd and >= 1, got {self.receptive_field}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < 1:
            raise ConfigurationError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.receptive_field ** 2 * self.feature_dim

    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.num_classes]

    def param_count(self) -> int:
        dims = self.layer_dims()
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "receptive_field": self.receptive_field,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        return cls(
            kind=d["kind"],
            num_classes=int(d["num_classes"]),
            feature_dim=int(d["feature_dim"]),
            receptive_field=int(d.get("receptive_field", 3)),
            hidden_widths=tuple(int(w) for w in d.get("hidden_widths", ())),
            activation=d.get("activation", "relu"),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 8
    batch_pixels: int = 256
    seed: int = 0
    beta: float = 1.0        # pseudo-label loss weight
    em_weight: float = 1.0   # entropy-minimization weight
    init_scale: float = 0.1
    em_from_start: bool = True  # apply EM from the first iteration

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_pixels <= 0:
            raise ConfigurationError(f"batch_pixels must be > 0, got {self.batch_pixels}")
        if self.beta < 0 or self.em_weight < 0:
            raise ConfigurationError("beta and em_weight must be >= 0")
        if self.init_scale < 0:
            raise ConfigurationError(f"init_scale must be >= 0, got {self.init_scale}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "epochs": self.epochs,
            "batch_pixels": self.batch_pixels, "seed": self.seed,
            "beta": self.beta, "em_weight": self.em_weight,
            "init_scale": self.init_scale, "em_from_start": self.em_from_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --- objectives -------------------------------------------------------------

@dataclass(frozen=True)
class Supervised:
    """Cross-entropy on the labeled set only."""


@dataclass(frozen=True)
class SupervisedPlusEntropyMin:
    """Cross-entropy on labeled pixels plus entropy penalty on all target pixels."""

    target: TargetSet


@dataclass(frozen=True)
class SupervisedPlusPseudo:
    """Cross-entropy on labeled pixels plus masked cross-entropy on pseudo-labels.

    ``labels``/``masks`` are per-target-sample (H, W) arrays aligned with
    ``target.samples``; mask True means the pixel contributes to the loss.
    """

    target: TargetSet
    labels: tuple[np.ndarray, ...]
    masks: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.target) or len(self.masks) != len(self.target):
            raise ConfigurationError("pseudo-label arrays not aligned with target samples")


Objective = Supervised | SupervisedPlusEntropyMin | SupervisedPlusPseudo


# --- parameters -------------------------------------------------------------

def init_params(spec: ClassifierSpec, seed: int, init_scale: float = 0.1) -> np.ndarray:
    """Flat parameter vector: zero-mean weights scaled by init_scale/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims()
    parts = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = init_scale * rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
        parts.append(w.ravel())
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def unpack_params(spec: ClassifierSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if params.shape != (spec.param_count(),):
        raise ConfigurationError(
            f"parameter vector has length {params.shape}, spec needs ({spec.param_count()},)")
    dims = spec.layer_dims()
    layers, off = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off:off + fan_out]
        off += fan_out
        layers.append((w, b))
    return layers


# --- forward / backward -----------------------------------------------------

def extract_patches(features: np.ndarray, receptive_field: int) -> np.ndarray:
    """(H, W, F) -> (H*W, r*r*F) patch matrix, zero-padded at borders."""
    h, w, f = features.shape
    r = receptive_field
    pad = r // 2
    padded = np.pad(features, ((pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (r, r), axis=(0, 1))
    # (H, W, F, r, r) -> (H, W, r, r, F) so the patch vector is (dy, dx, feature)
    return windows.transpose(0, 1, 3, 4, 2).reshape(h * w, r * r * f)


def _forward_cached(layers, x: np.ndarray):
    acts = [x]
    for w, b in layers[:-1]:
        z = acts[-1] @ w + b
        acts.append(np.maximum(z, 0.0))
    w, b = layers[-1]
    scores = acts[-1] @ w + b
    return scores, acts


def _backward(layers, acts, dscores: np.ndarray) -> np.ndarray:
    grads = [None] * len(layers)
    delta = dscores
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        gw = acts[li].T @ delta
        gb = delta.sum(axis=0)
        grads[li] = (gw, gb)
        if li > 0:
            delta = (delta @ w.T) * (acts[li] > 0.0)
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_patches(spec: ClassifierSpec, params: np.ndarray, patches: np.ndarray) -> np.ndarray:
    """Posteriors (n, C) for a precomputed patch matrix."""
    scores, _ = _forward_cached(unpack_params(spec, params), patches)
    bad = ~np.isfinite(scores).all(axis=1)
    if bad.any():
        raise NumericError(f"non-finite score at pixel row {int(np.flatnonzero(bad)[0])}")
    return _softmax(scores)


def forward(spec: ClassifierSpec, params: np.ndarray,
            sample: SampleGrid | np.ndarray) -> np.ndarray:
    """Posterior grid (H, W, C) for one sample."""
    feats = sample.features if isinstance(sample, SampleGrid) else np.asarray(sample, float)
    h, w, f = feats.shape
    if f != spec.feature_dim:
        raise ConfigurationError(f"sample feature_dim {f} != spec feature_dim {spec.feature_dim}")
    scores, _ = _forward_cached(unpack_params(spec, params),
                                extract_patches(feats, spec.receptive_field))
    bad = ~np.isfinite(scores).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite score at pixel ({row // w}, {row % w})")
    return _softmax(scores).reshape(h, w, spec.num_classes)


# --- losses -----------------------------------------------------------------

@dataclass(frozen=True)
class LossResult:
    value: float
    dscores: np.ndarray  # gradient w.r.t. pre-softmax scores, same shape as posteriors
    clamped: int = 0     # pixels whose true-class posterior was clamped at LOG_CLAMP


def supervised_loss(posteriors: np.ndarray, labels: np.ndarray,
                    mask: np.ndarray | None = None) -> LossResult:
    """Mean negative log posterior of the true class over selected pixels.

    ``mask`` True selects pixels that contribute; everything else contributes
    exactly zero loss and zero gradient. Returns 0 when nothing is selected.
    """
    p = np.asarray(posteriors, dtype=float)
    flat_p = p.reshape(-1, p.shape[-1])
    flat_y = np.asarray(labels).reshape(-1)
    if flat_y.shape[0] != flat_p.shape[0]:
        raise ConfigurationError("posterior/label shape mismatch")
    if mask is None:
        keep = np.arange(flat_p.shape[0])
    else:
        flat_m = np.asarray(mask, dtype=bool).reshape(-1)
        if flat_m.shape[0] != flat_p.shape[0]:
            raise ConfigurationError("posterior/mask shape mismatch")
        keep = np.flatnonzero(flat_m)
    dscores = np.zeros_like(flat_p)
    if keep.size == 0:
        return LossResult(0.0, dscores.reshape(p.shape))
    n = keep.size
    true_p = flat_p[keep, flat_y[keep]]
    clamped = int((true_p < LOG_CLAMP).sum())
    value = float(-np.log(np.maximum(true_p, LOG_CLAMP)).mean())
    g = flat_p[keep].copy()
    g[np.arange(n), flat_y[keep]] -= 1.0
    dscores[keep] = g / n
    return LossResult(value, dscores.reshape(p.shape), clamped)


def entropy_loss(posteriors: np.ndarray, weight: float = 1.0) -> LossResult:
    """weight * mean over pixels of the natural-log entropy of the posterior."""
    p = np.asarray(posteriors, dtype=float)
    flat_p = p.reshape(-1, p.shape[-1])
    if weight == 0.0:
        return LossResult(0.0, np.zeros_like(p))
    n = flat_p.shape[0]
    clamped = int((flat_p < LOG_CLAMP).sum())
    logp = np.log(np.maximum(flat_p, LOG_CLAMP))
    ent = -(flat_p * logp).sum(axis=1)
    value = float(weight * ent.mean())
    dscores = (weight / n) * (-flat_p * (logp + ent[:, None]))
    return LossResult(value, dscores.reshape(p.shape), clamped)


@dataclass(frozen=True)
class ObjectiveValue:
    """Full-batch objective with its independently computable parts."""

    total: float
    supervised: float
    pseudo: float
    entropy: float
    grad: np.ndarray
    clamped: int


def training_loss(
    spec: ClassifierSpec,
    params: np.ndarray,
    sup: tuple[np.ndarray, np.ndarray] | None = None,
    pseudo: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    em: np.ndarray | None = None,
    beta: float = 1.0,
    em_weight: float = 1.0,
) -> ObjectiveValue:
    """Combined objective on patch matrices: sup CE + beta*masked CE + em*entropy.

    sup = (X, y); pseudo = (X, y, keep_mask); em = X. Gradient is w.r.t. the
    flat parameter vector; terms with zero weight contribute exactly nothing.
    """
    layers = unpack_params(spec, params)
    grad = np.zeros_like(params)
    sup_v = ps_v = em_v = 0.0
    clamped = 0

    if sup is not None:
        x, y = sup
        scores, acts = _forward_cached(layers, x)
        res = supervised_loss(_softmax(scores), y)
        sup_v = res.value
        clamped += res.clamped
        grad += _backward(layers, acts, res.dscores)
    if pseudo is not None and beta > 0.0:
        x, y, keep = pseudo
        # gather included rows up front: excluded pixels never enter the
        # computation, so the loss and gradient are exactly independent of them
        kidx = np.flatnonzero(np.asarray(keep, dtype=bool).reshape(-1))
        if kidx.size:
            scores, acts = _forward_cached(layers, x[kidx])
            res = supervised_loss(_softmax(scores), np.asarray(y).reshape(-1)[kidx])
            ps_v = res.value
            clamped += res.clamped
            grad += beta * _backward(layers, acts, res.dscores)
    if em is not None and em_weight > 0.0:
        scores, acts = _forward_cached(layers, em)
        res = entropy_loss(_softmax(scores), 1.0)
        em_v = res.value
        clamped += res.clamped
        grad += em_weight * _backward(layers, acts, res.dscores)

    total = sup_v + beta * ps_v + em_weight * em_v
    return ObjectiveValue(total, sup_v, ps_v, em_v, grad, clamped)


# --- training ---------------------------------------------------------------

def _labeled_pixels(spec: ClassifierSpec, labeled: LabeledSet):
    xs, ys = [], []
    for grid, lab in labeled.samples:
        xs.append(extract_patches(grid.features, spec.receptive_field))
        ys.append(lab.labels.reshape(-1))
    return np.concatenate(xs), np.concatenate(ys)


def _target_pixels(spec: ClassifierSpec, target: TargetSet):
    return np.concatenate([extract_patches(g.features, spec.receptive_field)
                           for g in target.samples])


def train(
    spec: ClassifierSpec,
    params: np.ndarray,
    labeled: LabeledSet,
    objective: Objective,
    config: TrainConfig,
) -> np.ndarray:
    """Mini-batch SGD for ``config.epochs`` passes; returns final parameters.

    Labeled and target pixels are pooled and sampled uniformly; each batch
    contributes per-set subset means so the step objective stays
    sup + beta*pseudo (+ em_weight*entropy). A zero beta or em_weight
    degenerates bit-exactly to the pure supervised trajectory.
    """
    params = params.astype(float).copy()
    if config.epochs == 0:
        return params

    x_sup, y_sup = _labeled_pixels(spec, labeled)
    n_sup = x_sup.shape[0]

    x_tgt = y_ps = m_ps = None
    mode = "supervised"
    if isinstance(objective, SupervisedPlusEntropyMin) and config.em_weight > 0.0:
        x_tgt = _target_pixels(spec, objective.target)
        mode = "em"
    elif isinstance(objective, SupervisedPlusPseudo) and config.beta > 0.0:
        x_tgt = _target_pixels(spec, objective.target)
        y_ps = np.concatenate([l.reshape(-1) for l in objective.labels])
        m_ps = np.concatenate([m.reshape(-1) for m in objective.masks]).astype(bool)
        mode = "pseudo"
    n_tgt = 0 if x_tgt is None else x_tgt.shape[0]

    rng = np.random.default_rng(config.seed)
    n_pool = n_sup + n_tgt
    step = 0
    for epoch in range(config.epochs):
        em_active = config.em_from_start or epoch > 0
        order = rng.permutation(n_pool)
        for start in range(0, n_pool, config.batch_pixels):
            idx = order[start:start + config.batch_pixels]
            sup_idx = idx[idx < n_sup]
            tgt_idx = idx[idx >= n_sup] - n_sup
            sup_batch = (x_sup[sup_idx], y_sup[sup_idx]) if sup_idx.size else None
            pseudo_batch = em_batch = None
            if mode == "pseudo" and tgt_idx.size:
                pseudo_batch = (x_tgt[tgt_idx], y_ps[tgt_idx], m_ps[tgt_idx])
            elif mode == "em" and tgt_idx.size and em_active:
                em_batch = x_tgt[tgt_idx]
            obj = training_loss(spec, params, sup=sup_batch, pseudo=pseudo_batch,
                                em=em_batch, beta=config.beta, em_weight=config.em_weight)
            if not math.isfinite(obj.total):
                raise TrainingDiverged(step)
            params -= config.learning_rate * obj.grad
            step += 1
    return params


def gradient_check(
    spec: ClassifierSpec,
    params: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    step: float = 1e-4,
) -> float:
    """Max relative error between analytic gradient and central differences.

    ``loss_fn(params) -> (value, grad)``. Every parameter is perturbed; meant
    for small instances (<= a few hundred parameters).
    """
    _, analytic = loss_fn(params)
    numeric = np.empty_like(analytic)
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] += step
        hi, _ = loss_fn(bumped)
        bumped[i] -= 2 * step
        lo, _ = loss_fn(bumped)
        numeric[i] = (hi - lo) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / denom).max())


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(out_dir: str | Path, spec: ClassifierSpec, params: np.ndarray,
                    config: TrainConfig, seed: int, final_loss: float | None = None) -> None:
    """Manifest JSON + flat float32 parameter file (header width is u16,
    so desk-scale models must stay under 65536 parameters)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = params.size
    if n > gridio.MAX_DIM:
        raise DataFormatError(f"{n} parameters exceed the u16 checkpoint header limit")
    gridio.write_f32(out / "params.bin", params.reshape(1, n, 1))
    manifest = {
        "format": "transeg-checkpoint",
        "version": 1,
        "spec": spec.to_dict(),
        "config": config.to_dict(),
        "seed": seed,
        "final_loss": final_loss,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[ClassifierSpec, np.ndarray, TrainConfig, int]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "transeg-checkpoint":
        raise DataFormatError(f"{path}: not a checkpoint manifest")
    spec = ClassifierSpec.from_dict(manifest["spec"])
    params = gridio.read_f32(path / "params.bin").reshape(-1)
    if params.shape != (spec.param_count(),):
        raise DataFormatError(f"{path}: parameter count {params.size} does not match spec")
    return spec, params, TrainConfig.from_dict(manifest["config"]), int(manifest["seed"])
