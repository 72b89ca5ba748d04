"""Calibration analysis: entropy, expected information gain, reliability, ECE.

Converting a soft posterior into a one-hot pseudo-label injects the
posterior's entropy H as information — correct if the argmax class is right,
wrong otherwise. With confidence s scaled by a miscalibration factor delta
(delta=1 calibrated, <1 over-confident, >1 under-confident), the expected
gain is delta*s*H - (1 - delta*s)*H = (2*delta*s - 1)*H, which is positive
only above the confidence s* = 1/(2*delta). Everything here is in bits;
training losses (learner module) use natural log.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

_EPS = 1e-300  # guards 0*log(0) only; true zeros contribute exactly 0


def entropy_bits(posterior: np.ndarray) -> float:
    """Base-2 entropy of a distribution, with 0*log2(0) := 0."""
    p = np.asarray(posterior, dtype=float)
    if p.ndim != 1 or p.size < 1:
        raise ConfigurationError("posterior must be a 1-D probability vector")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ConfigurationError("posterior entries must be >= 0 and sum to 1")
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def surrogate_entropy(s: float | np.ndarray, num_classes: int) -> float | np.ndarray:
    """Entropy in bits of (s, (1-s)/(C-1), ..., (1-s)/(C-1)).

    The spread of the non-argmax mass is the illustrative surrogate; real
    posteriors need not match it, so empirical entropies are reported
    separately wherever both appear.
    """
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    s_arr = np.asarray(s, dtype=float)
    lo = 1.0 / num_classes
    if (s_arr < lo - 1e-12).any() or (s_arr > 1.0 + 1e-12).any():
        raise ConfigurationError(
            f"confidence must lie in [1/{num_classes}, 1], got {s}")
    s_arr = np.clip(s_arr, lo, 1.0)
    rest = (1.0 - s_arr) / (num_classes - 1)
    h = -(s_arr * np.log2(np.maximum(s_arr, _EPS))
          + (num_classes - 1) * rest * np.log2(np.maximum(rest, _EPS)))
    return float(h) if np.isscalar(s) or getattr(s, "ndim", 0) == 0 else h


def expected_ig(s: float | np.ndarray, delta: float, num_classes: int) -> float | np.ndarray:
    """Expected information gain (bits) of pseudo-labeling at confidence s.

    Equals (2*delta*s - 1) * surrogate_entropy(s, C). Values with
    delta*s > 1 fall outside the probabilistic reading; ig_curve flags them.
    """
    if delta <= 0:
        raise ConfigurationError(f"delta must be > 0, got {delta}")
    h = surrogate_entropy(s, num_classes)
    return (2.0 * delta * np.asarray(s, dtype=float) - 1.0) * h if not np.isscalar(h) \
        else float((2.0 * delta * s - 1.0) * h)


def ig_zero_crossing(delta: float, num_classes: int | None = None) -> float:
    """Confidence s* = 1/(2*delta) below which expected IG is negative.

    Over-confident models (smaller delta) push the crossing up. When
    num_classes is given the value is clamped into the attainable range
    [1/C, 1]; ig_curve records whether clamping fired.
    """
    if delta <= 0:
        raise ConfigurationError(f"delta must be > 0, got {delta}")
    s_star = 1.0 / (2.0 * delta)
    if num_classes is not None:
        s_star = min(max(s_star, 1.0 / num_classes), 1.0)
    return s_star


@dataclass(frozen=True)
class IGCurve:
    """Sampled expected-IG curve for one miscalibration level."""

    delta: float
    num_classes: int
    s: tuple[float, ...]
    ig_bits: tuple[float, ...]
    in_model: tuple[bool, ...]  # False where delta*s > 1
    zero_crossing: float
    zero_crossing_in_range: bool


def ig_curve(delta: float, num_classes: int, grid_size: int = 201) -> IGCurve:
    """Sample expected_ig on a uniform confidence grid over [1/C, 1]."""
    if grid_size < 2:
        raise ConfigurationError(f"grid_size must be >= 2, got {grid_size}")
    s = np.linspace(1.0 / num_classes, 1.0, grid_size)
    ig = expected_ig(s, delta, num_classes)
    raw_star = ig_zero_crossing(delta)
    in_range = 1.0 / num_classes <= raw_star <= 1.0
    return IGCurve(
        delta=delta,
        num_classes=num_classes,
        s=tuple(float(v) for v in s),
        ig_bits=tuple(float(v) for v in ig),
        in_model=tuple(bool(v) for v in delta * s <= 1.0 + 1e-12),
        zero_crossing=ig_zero_crossing(delta, num_classes),
        zero_crossing_in_range=in_range,
    )


# --- reliability ------------------------------------------------------------

@dataclass(frozen=True)
class ReliabilityBin:
    confidence_lo: float
    confidence_hi: float
    mean_confidence: float  # nan when empty
    accuracy: float         # nan when empty
    count: int


@dataclass(frozen=True)
class CalibrationReport:
    bins: tuple[ReliabilityBin, ...]
    ece: float
    n_predictions: int


def reliability(
    predictions: Sequence[tuple[float, bool]],
    num_classes: int,
    bins: int = 10,
) -> CalibrationReport:
    """Equal-width reliability bins on [1/C, 1] plus the expected calibration error.

    A confidence lands in bin i when lo_i <= s < hi_i; the last bin also
    takes s = 1. ECE is the count-weighted mean |accuracy - mean confidence|
    over nonempty bins.
    """
    if len(predictions) == 0:
        raise ConfigurationError("reliability requires at least one prediction")
    if bins < 1:
        raise ConfigurationError(f"bins must be >= 1, got {bins}")
    conf = np.asarray([c for c, _ in predictions], dtype=float)
    correct = np.asarray([bool(ok) for _, ok in predictions])
    if (conf < 0).any() or (conf > 1).any():
        raise ConfigurationError("confidences must lie in [0, 1]")
    lo = 1.0 / num_classes
    edges = np.linspace(lo, 1.0, bins + 1)
    # max-posterior confidence cannot fall below 1/C; clip float dust into range
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, bins - 1)

    out = []
    ece = 0.0
    n = conf.size
    for b in range(bins):
        sel = idx == b
        count = int(sel.sum())
        if count:
            mc = float(conf[sel].mean())
            acc = float(correct[sel].mean())
            ece += (count / n) * abs(acc - mc)
        else:
            mc = acc = float("nan")
        out.append(ReliabilityBin(float(edges[b]), float(edges[b + 1]), mc, acc, count))
    return CalibrationReport(tuple(out), float(ece), n)


def empirical_delta(predictions: Sequence[tuple[float, bool]]) -> float:
    """Overall accuracy divided by mean confidence: <1 over-confident, >1 under."""
    if len(predictions) == 0:
        raise ConfigurationError("empirical_delta requires at least one prediction")
    conf = np.asarray([c for c, _ in predictions], dtype=float)
    correct = np.asarray([bool(ok) for _, ok in predictions])
    mean_conf = conf.mean()
    if mean_conf == 0:
        raise ConfigurationError("mean confidence is zero")
    return float(correct.mean() / mean_conf)


# --- CSV emitters -----------------------------------------------------------

def write_ig_curves_csv(path: str | Path, curves: Sequence[IGCurve]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["s", "ig_bits", "delta", "num_classes"])
        for c in curves:
            for s, ig in zip(c.s, c.ig_bits):
                w.writerow([f"{s:.10g}", f"{ig:.10g}", f"{c.delta:.10g}", c.num_classes])


def write_reliability_csv(path: str | Path, report: CalibrationReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "mean_conf", "accuracy", "count"])
        for b in report.bins:
            w.writerow([f"{b.confidence_lo:.10g}", f"{b.confidence_hi:.10g}",
                        "" if np.isnan(b.mean_confidence) else f"{b.mean_confidence:.10g}",
                        "" if np.isnan(b.accuracy) else f"{b.accuracy:.10g}",
                        b.count])


def write_calibration_summary_csv(path: str | Path, ece: float, delta_hat: float,
                                  n: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ece", "delta_hat", "n"])
        w.writerow([f"{ece:.10g}", f"{delta_hat:.10g}", n])
