"""Confusion counts and accuracy / precision / recall / F1 reports.

Scores are computed at two granularities: one binary problem per base defect
and one one-vs-rest problem per pattern class.  A multilabel prediction whose
thresholded mask is not one of the 38 patterns is counted as *invalid*; it
never matches any class, so it is a false negative for its true class.

Zero denominators in precision, recall or F1 yield 0 and the metric name is
listed in the row's ``degenerate`` field.
"""

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import jsonschema
import numpy as np

from .errors import ContractError, UndefinedMetricError
from .patterns import BASE_DEFECTS, CLASS_MASKS, MASK_TO_INDEX, NUM_BASE, NUM_CLASSES

METRIC_NAMES = ("precision", "recall", "f1", "accuracy")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for k in ("tp", "fp", "fn", "tn"):
            v = getattr(self, k)
            if v < 0 or int(v) != v:
                raise ContractError(f"{k} must be a non-negative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise UndefinedMetricError("accuracy over zero decisions")
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts) -> float:
    d = c.tp + c.fp
    return c.tp / d if d else 0.0


def recall(c: ConfusionCounts) -> float:
    d = c.tp + c.fn
    return c.tp / d if d else 0.0


def f1_from(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r else 0.0


def f1(c: ConfusionCounts) -> float:
    return f1_from(precision(c), recall(c))


def degenerate_metrics(c: ConfusionCounts) -> List[str]:
    out = []
    if c.tp + c.fp == 0:
        out.append("precision")
    if c.tp + c.fn == 0:
        out.append("recall")
    if precision(c) + recall(c) == 0:
        out.append("f1")
    return out


def confusion(pred: np.ndarray, true: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    return ConfusionCounts(
        tp=int(np.sum(pred & true)), fp=int(np.sum(pred & ~true)),
        fn=int(np.sum(~pred & true)), tn=int(np.sum(~pred & ~true)))


@dataclass
class MetricRow:
    name: str
    counts: ConfusionCounts
    support: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    degenerate: List[str] = field(default_factory=list)

    @classmethod
    def from_counts(cls, name: str, c: ConfusionCounts) -> "MetricRow":
        return cls(name, c, c.tp + c.fn, precision(c), recall(c), f1(c), accuracy(c),
                   degenerate_metrics(c))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRow":
        d = dict(d)
        d["counts"] = ConfusionCounts(**d["counts"])
        return cls(**d)


def _macro(rows: Sequence[MetricRow]) -> Dict[str, float]:
    if not rows:
        return {m: 0.0 for m in METRIC_NAMES}
    return {m: float(np.mean([getattr(r, m) for r in rows])) for m in METRIC_NAMES}


@dataclass
class EvalReport:
    mode: str
    threshold: Optional[float]
    sample_count: int
    invalid_count: int
    exact_match_accuracy: float
    base_defects: List[MetricRow]
    classes: List[MetricRow]                 # all 38, in class order
    macro: Dict[str, float]                  # over classes present in the targets
    base_macro: Dict[str, float]

    @property
    def present_classes(self) -> List[MetricRow]:
        return [r for r in self.classes if r.support > 0]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "threshold": self.threshold,
            "sample_count": self.sample_count, "invalid_count": self.invalid_count,
            "exact_match_accuracy": self.exact_match_accuracy,
            "base_defects": [r.to_dict() for r in self.base_defects],
            "classes": [r.to_dict() for r in self.classes],
            "macro": dict(self.macro), "base_macro": dict(self.base_macro),
            "macro_averaging": "unweighted mean over classes present in the test set",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            d["mode"], d["threshold"], d["sample_count"], d["invalid_count"],
            d["exact_match_accuracy"],
            [MetricRow.from_dict(r) for r in d["base_defects"]],
            [MetricRow.from_dict(r) for r in d["classes"]],
            dict(d["macro"]), dict(d["base_macro"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Per-class table with an ``Average`` (macro) footer row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "accuracy"])
        for r in self.present_classes:
            w.writerow([r.name] + [f"{getattr(r, m):.6f}" for m in METRIC_NAMES])
        w.writerow(["Average"] + [f"{self.macro[m]:.6f}" for m in METRIC_NAMES])
        return buf.getvalue()


def predicted_masks(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    bits = (np.asarray(probs) >= threshold).astype(np.int64)
    return (bits << np.arange(NUM_BASE)).sum(axis=1)


def _mask_bits(masks: np.ndarray) -> np.ndarray:
    return ((np.asarray(masks, dtype=np.int64)[:, None] >> np.arange(NUM_BASE)) & 1).astype(bool)


def evaluate(scores, target_masks, threshold: float = 0.5, mode: Optional[str] = None) -> EvalReport:
    """Score predictions against true label masks.

    ``scores`` is ``[n, 8]`` per-defect probabilities (multilabel) or
    ``[n, 38]`` class scores (multiclass); ``mode`` defaults from the width.
    """
    scores = np.asarray(scores, dtype=np.float64)
    target_masks = np.asarray(target_masks, dtype=np.int64).reshape(-1)
    n = len(target_masks)
    if n == 0:
        raise ContractError("cannot evaluate an empty test set")
    if scores.ndim != 2 or len(scores) != n:
        raise ContractError(f"scores shape {scores.shape} does not match {n} targets")
    if mode is None:
        mode = "multiclass" if scores.shape[1] == NUM_CLASSES else "multilabel"
    if mode == "multilabel":
        if scores.shape[1] != NUM_BASE:
            raise ContractError(f"multilabel scores need {NUM_BASE} columns, got {scores.shape[1]}")
        pred_masks = predicted_masks(scores, threshold)
        pred_cls = np.array([MASK_TO_INDEX[m] for m in pred_masks], dtype=np.int64)
    elif mode == "multiclass":
        if scores.shape[1] != NUM_CLASSES:
            raise ContractError(f"multiclass scores need {NUM_CLASSES} columns, got {scores.shape[1]}")
        pred_cls = scores.argmax(axis=1)
        pred_masks = np.array(CLASS_MASKS, dtype=np.int64)[pred_cls]
        threshold = None
    else:
        raise ContractError(f"unknown mode {mode!r}")
    true_cls = np.array([MASK_TO_INDEX[m] for m in target_masks], dtype=np.int64)
    if (true_cls < 0).any():
        raise ContractError("targets contain masks outside the 38 patterns")

    pb, tb = _mask_bits(pred_masks), _mask_bits(target_masks)
    base_rows = [MetricRow.from_counts(BASE_DEFECTS[i], confusion(pb[:, i], tb[:, i]))
                 for i in range(NUM_BASE)]
    class_rows = [MetricRow.from_counts(f"C{k + 1}", confusion(pred_cls == k, true_cls == k))
                  for k in range(NUM_CLASSES)]
    present = [r for r in class_rows if r.support > 0]
    return EvalReport(
        mode=mode, threshold=threshold, sample_count=n,
        invalid_count=int((pred_cls < 0).sum()),
        exact_match_accuracy=float(np.mean(pred_cls == true_cls)),
        base_defects=base_rows, classes=class_rows,
        macro=_macro(present), base_macro=_macro(base_rows))


_ROW_SCHEMA = {
    "type": "object",
    "required": ["name", "counts", "support", "precision", "recall", "f1", "accuracy", "degenerate"],
    "properties": {
        "name": {"type": "string"},
        "counts": {
            "type": "object",
            "required": ["tp", "fp", "fn", "tn"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("tp", "fp", "fn", "tn")},
        },
        "support": {"type": "integer", "minimum": 0},
        **{m: {"type": "number", "minimum": 0, "maximum": 1} for m in METRIC_NAMES},
        "degenerate": {"type": "array", "items": {"enum": ["precision", "recall", "f1"]}},
    },
}
_AVG_SCHEMA = {
    "type": "object",
    "required": list(METRIC_NAMES),
    "properties": {m: {"type": "number", "minimum": 0, "maximum": 1} for m in METRIC_NAMES},
}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EvalReport",
    "type": "object",
    "required": ["mode", "threshold", "sample_count", "invalid_count", "exact_match_accuracy",
                 "base_defects", "classes", "macro", "base_macro"],
    "properties": {
        "mode": {"enum": ["multilabel", "multiclass"]},
        "threshold": {"type": ["number", "null"]},
        "sample_count": {"type": "integer", "minimum": 1},
        "invalid_count": {"type": "integer", "minimum": 0},
        "exact_match_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "base_defects": {"type": "array", "items": _ROW_SCHEMA, "minItems": NUM_BASE, "maxItems": NUM_BASE},
        "classes": {"type": "array", "items": _ROW_SCHEMA, "minItems": NUM_CLASSES, "maxItems": NUM_CLASSES},
        "macro": _AVG_SCHEMA,
        "base_macro": _AVG_SCHEMA,
        "macro_averaging": {"type": "string"},
    },
}


def validate_report(d: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``d`` is not a valid report dict."""
    jsonschema.validate(d, REPORT_SCHEMA)
