"""Frame-level defect tags from predicted masks via per-class thresholds.

A frame is tagged with class c when the number of pixels predicted as c
reaches that class's threshold (absolute pixel count or fraction of frame
area).  Thresholds are fit per class on validation data by exhaustive grid
search maximizing F1, ties broken toward the larger threshold.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .taxonomy import NUM_CLASSES, class_name, class_id_by_name

TAGGABLE_CLASSES = tuple(range(1, NUM_CLASSES))  # every non-void class

PIXEL_GRID = tuple(float(2 ** k) for k in range(13))  # 1 .. 4096 pixels
FRACTION_GRID = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05)

NEVER = math.inf  # sentinel threshold: the class is never tagged


@dataclass(frozen=True)
class GridSpec:
    unit: str = "pixels"  # "pixels" | "fraction"
    values: tuple[float, ...] = PIXEL_GRID

    def __post_init__(self):
        if self.unit not in ("pixels", "fraction"):
            raise ConfigError(f"unit must be 'pixels' or 'fraction', got {self.unit!r}")
        if not self.values or any(not v >= 0 for v in self.values):
            raise ConfigError("grid values must be a non-empty set of finite >= 0")


def fraction_grid() -> GridSpec:
    return GridSpec(unit="fraction", values=FRACTION_GRID)


@dataclass(frozen=True)
class ThresholdTable:
    unit: str = "pixels"
    values: dict[int, float] = field(default_factory=dict)  # class id -> threshold

    def __post_init__(self):
        if self.unit not in ("pixels", "fraction"):
            raise ConfigError(f"unit must be 'pixels' or 'fraction', got {self.unit!r}")
        for c, v in self.values.items():
            if c not in TAGGABLE_CLASSES:
                raise ConfigError(f"threshold for invalid class id {c}")
            if math.isnan(v) or v < 0:
                raise ConfigError(f"threshold for class {c} must be >= 0, got {v}")

    def threshold(self, class_id: int) -> float:
        try:
            return self.values[class_id]
        except KeyError:
            raise ConfigError(
                f"no threshold for class {class_name(class_id)!r}"
            ) from None


def uniform_thresholds(value: float = 1.0, unit: str = "pixels") -> ThresholdTable:
    return ThresholdTable(unit, {c: value for c in TAGGABLE_CLASSES})


def _class_values(mask: np.ndarray, unit: str) -> np.ndarray:
    """Per-class pixel counts, or area fractions when unit='fraction'."""
    mask = np.asarray(mask)
    if ((mask < 0) | (mask >= NUM_CLASSES)).any():
        raise DataError(f"mask holds ids outside [0, {NUM_CLASSES})")
    counts = np.bincount(mask.ravel(), minlength=NUM_CLASSES).astype(np.float64)
    return counts / mask.size if unit == "fraction" else counts


def tag_frame(mask: np.ndarray, thresholds: ThresholdTable) -> set[int]:
    """Classes whose predicted pixel extent reaches their threshold."""
    values = _class_values(mask, thresholds.unit)
    return {c for c in TAGGABLE_CLASSES if values[c] >= thresholds.threshold(c)}


def tags_from_mask(mask: np.ndarray) -> set[int]:
    """Ground-truth frame tags: every class with at least one pixel."""
    values = _class_values(mask, "pixels")
    return {c for c in TAGGABLE_CLASSES if values[c] > 0}


# ---------------------------------------------------------------------------
# Threshold search


def _f1(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def search_thresholds(
    pred_masks: list[np.ndarray],
    gt_tags: list[set[int]],
    grid: GridSpec = GridSpec(),
) -> ThresholdTable:
    """Per class, the grid value maximizing frame-tag F1 on validation data.

    Ties go to the larger threshold (fewer false positives at equal F1); a
    class with no positive ground-truth frame gets the never-tag sentinel.
    """
    if len(pred_masks) != len(gt_tags):
        raise DataError(f"{len(pred_masks)} masks vs {len(gt_tags)} tag sets")
    if not pred_masks:
        raise DataError("empty validation set")
    values = np.stack([_class_values(m, grid.unit) for m in pred_masks])
    chosen: dict[int, float] = {}
    for c in TAGGABLE_CLASSES:
        positive = np.array([c in tags for tags in gt_tags])
        if not positive.any():
            warnings.warn(
                f"class {class_name(c)!r} has no positive frame; never tagged",
                RuntimeWarning,
            )
            chosen[c] = NEVER
            continue
        best_f1, best_thr = -1.0, None
        for thr in sorted(grid.values):
            tagged = values[:, c] >= thr
            f1 = _f1(
                tp=int((tagged & positive).sum()),
                fp=int((tagged & ~positive).sum()),
                fn=int((~tagged & positive).sum()),
            )
            if f1 >= best_f1:
                best_f1, best_thr = f1, thr
        chosen[c] = best_thr
    return ThresholdTable(grid.unit, chosen)


# ---------------------------------------------------------------------------
# Tag scoring


@dataclass(frozen=True)
class TagScore:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class TagReport:
    per_class: dict[int, TagScore]
    macro_f1: float

    def to_json_dict(self) -> dict:
        doc = {
            "per_class": {
                class_name(c): {
                    "precision": s.precision, "recall": s.recall, "f1": s.f1,
                    "tp": s.tp, "fp": s.fp, "fn": s.fn,
                }
                for c, s in self.per_class.items()
            },
            "macro_f1": self.macro_f1,
        }
        return doc


def tag_prf(pred_tags: list[set[int]], gt_tags: list[set[int]]) -> TagReport:
    """Per-class precision/recall/F1 over frames, plus macro-F1.

    Conventions: precision is 0 when nothing was predicted, recall is 0 when
    nothing was positive, F1 is 0 when both are 0; macro-F1 averages only
    classes with at least one positive ground-truth frame.
    """
    if len(pred_tags) != len(gt_tags):
        raise DataError(f"{len(pred_tags)} predictions vs {len(gt_tags)} ground truths")
    per_class: dict[int, TagScore] = {}
    macro: list[float] = []
    for c in TAGGABLE_CLASSES:
        tp = sum(1 for p, g in zip(pred_tags, gt_tags) if c in p and c in g)
        fp = sum(1 for p, g in zip(pred_tags, gt_tags) if c in p and c not in g)
        fn = sum(1 for p, g in zip(pred_tags, gt_tags) if c not in p and c in g)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = _f1(tp, fp, fn)
        per_class[c] = TagScore(precision, recall, f1, tp, fp, fn)
        if tp + fn > 0:
            macro.append(f1)
    if not macro:
        raise DataError("no class has a positive ground-truth frame")
    return TagReport(per_class, float(np.mean(macro)))


def format_tag_table(report: TagReport) -> str:
    width = max(len(class_name(c)) for c in report.per_class) + 2
    lines = [f"{'label':<{width}}{'Precision (%)':>14}{'Recall (%)':>12}{'F1 (%)':>9}"]
    for c, s in report.per_class.items():
        lines.append(
            f"{class_name(c):<{width}}{100 * s.precision:>14.1f}"
            f"{100 * s.recall:>12.1f}{100 * s.f1:>9.1f}"
        )
    lines.append(f"{'macro F1':<{width}}{'':>14}{'':>12}{100 * report.macro_f1:>9.1f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Persistence


def write_thresholds(table: ThresholdTable, path) -> None:
    """JSON {class_name: {value, unit}}; the never-tag sentinel becomes null."""
    doc = {
        class_name(c): {"value": None if math.isinf(v) else v, "unit": table.unit}
        for c, v in sorted(table.values.items())
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_thresholds(path) -> ThresholdTable:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no threshold table at {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"unreadable threshold table {path}: {e}") from e
    values: dict[int, float] = {}
    units = set()
    for name, entry in doc.items():
        units.add(entry["unit"])
        value = entry["value"]
        values[class_id_by_name(name)] = NEVER if value is None else float(value)
    if len(units) != 1:
        raise DataError(f"threshold table mixes units: {sorted(units)}")
    return ThresholdTable(units.pop(), values)
