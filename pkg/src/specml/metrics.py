"""Multi-label evaluation: per-class confusion counts and summary metrics.

Accuracy is label-wise (the fraction of correct cells of the full N x C
prediction grid, i.e. 1 - Hamming loss). Precision, recall and F1 are
reported per class plus macro (unweighted mean over classes where the
metric is defined) and micro (computed from pooled counts) variants.
Per-class values with a zero denominator are marked undefined (NaN) and
excluded from the macro means rather than coerced to 0 or 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, ShapeMismatch
from .validation import as_float_array, check_multihot


@dataclass
class ConfusionCounts:
    """Per-class tp/fp/tn/fn over a sample set; tp+fp+tn+fn = N per class."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    @property
    def n_samples(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.tn[0] + self.fn[0])


def confusion(probabilities, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Threshold probabilities (prediction = p >= threshold) and count."""
    if not 0.0 < threshold < 1.0:
        raise InvalidConfig("threshold must lie strictly between 0 and 1")
    probs = as_float_array(probabilities, "probabilities", ndim=2)
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise InvalidConfig("probabilities must lie in [0, 1]")
    y = check_multihot(labels).astype(bool)
    if probs.shape != y.shape:
        raise ShapeMismatch(f"probabilities {probs.shape} vs labels {y.shape}")
    pred = probs >= threshold
    tp = (pred & y).sum(axis=0).astype(np.int64)
    fp = (pred & ~y).sum(axis=0).astype(np.int64)
    fn = (~pred & y).sum(axis=0).astype(np.int64)
    tn = (~pred & ~y).sum(axis=0).astype(np.int64)
    return ConfusionCounts(tp, fp, tn, fn)


@dataclass
class MetricsReport:
    accuracy: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    threshold: float
    undefined_precision: list = field(default_factory=list)
    undefined_recall: list = field(default_factory=list)
    undefined_f1: list = field(default_factory=list)

    def to_text(self) -> str:
        """Flat key-value lines, values with 4 decimal places."""
        lines = [
            f"threshold {self.threshold:.4f}",
            f"accuracy {_fmt(self.accuracy)}",
            f"macro_precision {_fmt(self.macro_precision)}",
            f"macro_recall {_fmt(self.macro_recall)}",
            f"macro_f1 {_fmt(self.macro_f1)}",
            f"micro_precision {_fmt(self.micro_precision)}",
            f"micro_recall {_fmt(self.micro_recall)}",
            f"micro_f1 {_fmt(self.micro_f1)}",
        ]
        for c in range(len(self.per_class_precision)):
            lines.append(f"class_{c}_precision {_fmt(self.per_class_precision[c])}")
            lines.append(f"class_{c}_recall {_fmt(self.per_class_recall[c])}")
            lines.append(f"class_{c}_f1 {_fmt(self.per_class_f1[c])}")
        lines.append("zero_denominator_policy excluded_from_macro")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        def listify(arr):
            return [None if math.isnan(v) else v for v in arr.tolist()]

        payload = {
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "macro": {"precision": _none_if_nan(self.macro_precision),
                      "recall": _none_if_nan(self.macro_recall),
                      "f1": _none_if_nan(self.macro_f1)},
            "micro": {"precision": _none_if_nan(self.micro_precision),
                      "recall": _none_if_nan(self.micro_recall),
                      "f1": _none_if_nan(self.micro_f1)},
            "per_class": {"precision": listify(self.per_class_precision),
                          "recall": listify(self.per_class_recall),
                          "f1": listify(self.per_class_f1)},
            "undefined_classes": {"precision": self.undefined_precision,
                                  "recall": self.undefined_recall,
                                  "f1": self.undefined_f1},
            "zero_denominator_policy": "excluded_from_macro",
        }
        return json.dumps(payload, indent=2)


def _fmt(value) -> str:
    return "nan" if math.isnan(value) else f"{value:.4f}"


def _none_if_nan(value):
    return None if math.isnan(value) else value


def report(counts: ConfusionCounts, threshold: float = 0.5) -> MetricsReport:
    """Summarize confusion counts into the full metric surface."""
    tp = counts.tp.astype(np.float64)
    fp = counts.fp.astype(np.float64)
    tn = counts.tn.astype(np.float64)
    fn = counts.fn.astype(np.float64)

    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = np.full_like(precision, np.nan)
    both = ~np.isnan(precision) & ~np.isnan(recall)
    psum = precision + recall
    with np.errstate(invalid="ignore", divide="ignore"):
        f1[both] = np.where(psum[both] > 0,
                            2.0 * precision[both] * recall[both] / psum[both],
                            0.0)

    total = (tp + fp + tn + fn).sum()
    accuracy = float((tp + tn).sum() / total) if total else float("nan")
    micro_p = _scalar_ratio(tp.sum(), (tp + fp).sum())
    micro_r = _scalar_ratio(tp.sum(), (tp + fn).sum())
    if math.isnan(micro_p) or math.isnan(micro_r):
        micro_f1 = float("nan")
    elif micro_p + micro_r == 0:
        micro_f1 = 0.0
    else:
        micro_f1 = 2.0 * micro_p * micro_r / (micro_p + micro_r)

    return MetricsReport(
        accuracy=accuracy,
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        macro_precision=_nanmean(precision),
        macro_recall=_nanmean(recall),
        macro_f1=_nanmean(f1),
        micro_precision=micro_p,
        micro_recall=micro_r,
        micro_f1=micro_f1,
        threshold=threshold,
        undefined_precision=_nan_indices(precision),
        undefined_recall=_nan_indices(recall),
        undefined_f1=_nan_indices(f1),
    )


def evaluate(probabilities, labels, threshold: float = 0.5) -> MetricsReport:
    """confusion + report in one call."""
    return report(confusion(probabilities, labels, threshold), threshold)


def _ratio(num, den):
    out = np.full_like(num, np.nan, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def _scalar_ratio(num, den) -> float:
    return float(num / den) if den > 0 else float("nan")


def _nanmean(values) -> float:
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if defined.size else float("nan")


def _nan_indices(values) -> list:
    return [int(i) for i in np.flatnonzero(np.isnan(values))]
