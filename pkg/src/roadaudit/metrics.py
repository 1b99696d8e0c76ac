"""Confusion matrices, per-class IoU, mIoU/wIoU, and hierarchy-level reports.

Conventions, applied identically at every level:
  - void ground-truth pixels are never counted;
  - a void *prediction* on a non-void ground-truth pixel lands in the void
    column (a pure false negative for the ground-truth class);
  - a class enters the mean/weighted mean iff it has ground-truth pixels;
    classes absent from both prediction and ground truth are reported absent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import taxonomy
from .errors import DataError
from .taxonomy import HierarchyLevel


class UndefinedMetricError(ValueError):
    """Mean requested over a confusion matrix with no evaluated pixels."""


class ConfusionMatrix:
    """Square count grid, rows = ground truth, cols = prediction."""

    def __init__(self, level: HierarchyLevel, counts: np.ndarray | None = None):
        self.level = level
        k = taxonomy.label_count(level)
        if counts is None:
            counts = np.zeros((k, k), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (k, k) or (counts < 0).any():
            raise DataError(f"counts must be a non-negative {k}x{k} grid")
        self.counts = counts

    @property
    def num_labels(self) -> int:
        return self.counts.shape[0]

    def accumulate(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        """Add one aligned (ground truth, prediction) mask pair."""
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise DataError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
        k = self.num_labels
        for name, m in (("gt", gt), ("pred", pred)):
            if ((m < 0) | (m >= k)).any():
                raise DataError(f"{name} mask holds ids outside [0, {k})")
        keep = gt != 0
        idx = gt[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Entrywise sum; lets per-frame matrices accumulate concurrently."""
        if other.level is not self.level:
            raise DataError("cannot merge matrices from different levels")
        self.counts += other.counts
        return self

    def gt_pixels(self, label: int) -> int:
        return int(self.counts[label].sum())

    def iou(self, label: int) -> float | None:
        """IoU of one label; None when the label is absent from gt and pred."""
        if not 0 <= label < self.num_labels:
            raise DataError(f"label {label} outside [0, {self.num_labels})")
        inter = int(self.counts[label, label])
        union = int(self.counts[label].sum()) + int(self.counts[:, label].sum()) - inter
        if union == 0:
            return None
        return inter / union


def mean_iou(cm: ConfusionMatrix) -> float:
    """Unweighted mean IoU over evaluated labels present in ground truth."""
    ious = [cm.iou(c) for c in _present(cm)]
    return float(np.mean(ious))


def weighted_iou(cm: ConfusionMatrix) -> float:
    """IoU averaged with ground-truth pixel-share weights."""
    present = _present(cm)
    pixels = np.array([cm.gt_pixels(c) for c in present], dtype=np.float64)
    ious = np.array([cm.iou(c) for c in present], dtype=np.float64)
    # One fused sum(w*x)/sum(w) keeps a perfect score at exactly 1.0, where
    # normalizing the weights first can overshoot by an ulp.
    return float(np.average(ious, weights=pixels))


def _present(cm: ConfusionMatrix) -> list[int]:
    present = [c for c in taxonomy.evaluated_ids(cm.level) if cm.gt_pixels(c) > 0]
    if not present:
        raise UndefinedMetricError(
            f"no evaluated {cm.level.value} label has ground-truth pixels"
        )
    return present


@dataclass
class EvalReport:
    level: HierarchyLevel
    per_class_iou: dict[str, float]
    mean_iou: float
    weighted_iou: float
    gt_pixels: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "level": self.level.value,
            "per_class_iou": self.per_class_iou,
            "mean_iou": self.mean_iou,
            "weighted_iou": self.weighted_iou,
            "gt_pixels": self.gt_pixels,
        }


def report(cm: ConfusionMatrix) -> EvalReport:
    """Score one confusion matrix.

    per_class_iou covers every evaluated label with a defined IoU (present in
    gt or pred); the means cover only labels present in ground truth.
    """
    names = taxonomy.label_names(cm.level)
    per_class = {}
    gt_pix = {}
    for c in taxonomy.evaluated_ids(cm.level):
        iou = cm.iou(c)
        if iou is not None:
            per_class[names[c]] = iou
        gt_pix[names[c]] = cm.gt_pixels(c)
    return EvalReport(
        level=cm.level,
        per_class_iou=per_class,
        mean_iou=mean_iou(cm),
        weighted_iou=weighted_iou(cm),
        gt_pixels=gt_pix,
    )


def evaluate_hierarchy(
    pred_masks, gt_masks, levels=tuple(HierarchyLevel)
) -> dict[HierarchyLevel, EvalReport]:
    """Roll both mask lists up to each level, accumulate, and score."""
    pred_masks = list(pred_masks)
    gt_masks = list(gt_masks)
    if len(pred_masks) != len(gt_masks):
        raise DataError(
            f"{len(pred_masks)} predictions vs {len(gt_masks)} ground truths"
        )
    out = {}
    for level in levels:
        cm = ConfusionMatrix(level)
        for pred, gt in zip(pred_masks, gt_masks):
            cm.accumulate(
                taxonomy.rollup_mask(gt, level), taxonomy.rollup_mask(pred, level)
            )
        out[level] = report(cm)
    return out


def aggregate_counts(cm: ConfusionMatrix, table: np.ndarray, target: HierarchyLevel) -> ConfusionMatrix:
    """Sum rows/cols of a finer matrix by a label-mapping table.

    Used to cross-check that rolling masks up before accumulation and
    aggregating the finer confusion matrix give identical counts.
    """
    k = taxonomy.label_count(target)
    out = np.zeros((k, k), dtype=np.int64)
    for i in range(cm.num_labels):
        for j in range(cm.num_labels):
            out[table[i], table[j]] += cm.counts[i, j]
    return ConfusionMatrix(target, out)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["level", "per_class_iou", "mean_iou", "weighted_iou", "gt_pixels"],
    "properties": {
        "level": {"enum": [lv.value for lv in HierarchyLevel]},
        "per_class_iou": {
            "type": "object",
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "mean_iou": {"type": "number", "minimum": 0, "maximum": 1},
        "weighted_iou": {"type": "number", "minimum": 0, "maximum": 1},
        "gt_pixels": {
            "type": "object",
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
    },
}


def write_reports_json(reports: dict[HierarchyLevel, EvalReport], path) -> None:
    doc = {level.value: rep.to_json_dict() for level, rep in reports.items()}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def format_report_table(rep: EvalReport) -> str:
    """Fixed-width per-class IoU table, one row per class plus the two means."""
    width = max(len(n) for n in list(rep.gt_pixels) + ["weighted mean IoU"]) + 2
    lines = [f"{'label (' + rep.level.value + ')':<{width}}IoU (%)"]
    for name in rep.gt_pixels:
        if name in rep.per_class_iou:
            lines.append(f"{name:<{width}}{100 * rep.per_class_iou[name]:>7.1f}")
        else:
            lines.append(f"{name:<{width}}{'-':>7}")
    lines.append(f"{'mean IoU':<{width}}{100 * rep.mean_iou:>7.1f}")
    lines.append(f"{'weighted mean IoU':<{width}}{100 * rep.weighted_iou:>7.1f}")
    return "\n".join(lines)
