"""Deployment-phase audit: per-frame severity, track smoothing, GeoJSON map.

Severity of a class in a frame is its pixel share (count / frame area), so
scores are resolution-independent and live in [0, 1].  A centered moving
average over nearby frames steadies the per-class series (windows shrink at
the track edges), and every (frame, class) above a severity floor becomes a
Point feature at the frame's GPS fix, graded low/medium/high.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch.nn as nn

from .errors import ConfigError, DataError
from .models import predict_mask
from .tagging import TAGGABLE_CLASSES, ThresholdTable, tag_frame
from .taxonomy import NUM_CLASSES, class_name
from .dataset import Frame, GpsFix

DEFAULT_WINDOW = 5
DEFAULT_GRADE_CUTS = (0.01, 0.05)
DEFAULT_SEVERITY_FLOOR = 0.001


@dataclass(frozen=True)
class SeverityRecord:
    gps: GpsFix
    frame_index: int
    per_class_severity: dict[int, float]  # class id -> pixel share of frame

    def __post_init__(self):
        for c, s in self.per_class_severity.items():
            if not 0.0 <= s <= 1.0:
                raise DataError(f"severity {s} for class {c} outside [0, 1]")


@dataclass
class AuditTrack:
    sequence_id: str
    records: list[SeverityRecord] = field(default_factory=list)

    def __post_init__(self):
        indices = [r.frame_index for r in self.records]
        if indices != sorted(indices):
            raise DataError("severity records must be ordered by frame index")

    def series(self, class_id: int) -> np.ndarray:
        return np.array(
            [r.per_class_severity.get(class_id, 0.0) for r in self.records]
        )


def severity(mask: np.ndarray) -> dict[int, float]:
    """Pixel share of every non-void class (shares of all classes plus the
    void share sum to exactly 1)."""
    mask = np.asarray(mask)
    if ((mask < 0) | (mask >= NUM_CLASSES)).any():
        raise DataError(f"mask holds ids outside [0, {NUM_CLASSES})")
    counts = np.bincount(mask.ravel(), minlength=NUM_CLASSES)
    return {c: float(counts[c] / mask.size) for c in TAGGABLE_CLASSES}


def smooth_track(track: AuditTrack, window: int = DEFAULT_WINDOW) -> AuditTrack:
    """Centered per-class moving average; edge windows shrink to what exists.

    GPS fixes and frame indices pass through unchanged.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"smoothing window must be odd and >= 1, got {window}")
    n = len(track.records)
    if n == 0:
        return AuditTrack(track.sequence_id, [])
    if window == 1:  # identity window: keep values bit-exact
        return AuditTrack(track.sequence_id, list(track.records))
    radius = window // 2
    pos = np.arange(n)
    lo = np.maximum(0, pos - radius)
    hi = np.minimum(n, pos + radius + 1)
    smoothed_series = {}
    for c in TAGGABLE_CLASSES:
        csum = np.concatenate([[0.0], np.cumsum(track.series(c))])
        smoothed_series[c] = (csum[hi] - csum[lo]) / (hi - lo)
    records = [
        SeverityRecord(
            gps=r.gps,
            frame_index=r.frame_index,
            per_class_severity={c: float(smoothed_series[c][i])
                                for c in TAGGABLE_CLASSES},
        )
        for i, r in enumerate(track.records)
    ]
    return AuditTrack(track.sequence_id, records)


def _grade(value: float, cuts: tuple[float, float]) -> str:
    low_cut, high_cut = cuts
    if value < low_cut:
        return "low"
    if value < high_cut:
        return "medium"
    return "high"


def emit_map(
    tracks: list[AuditTrack],
    severity_floor: float = DEFAULT_SEVERITY_FLOOR,
    grade_cuts: tuple[float, float] = DEFAULT_GRADE_CUTS,
) -> dict:
    """GeoJSON FeatureCollection: one Point per (frame, class) at or above the
    floor, coordinates in [lon, lat] order."""
    if not 0 <= severity_floor <= 1:
        raise ConfigError(f"severity_floor must be in [0, 1], got {severity_floor}")
    if not 0 < grade_cuts[0] < grade_cuts[1] <= 1:
        raise ConfigError(f"grade cuts must satisfy 0 < low < high <= 1, got {grade_cuts}")
    features = []
    for track in tracks:
        for record in track.records:
            for c in sorted(record.per_class_severity):
                value = record.per_class_severity[c]
                if value >= severity_floor:
                    features.append({
                        "type": "Feature",
                        "geometry": {
                            "type": "Point",
                            "coordinates": [record.gps.lon, record.gps.lat],
                        },
                        "properties": {
                            "class": class_name(c),
                            "severity": value,
                            "grade": _grade(value, grade_cuts),
                            "sequence_id": track.sequence_id,
                            "frame_index": record.frame_index,
                        },
                    })
    return {"type": "FeatureCollection", "features": features}


# ---------------------------------------------------------------------------
# End-to-end streaming audit


@dataclass
class AuditResult:
    sequence_id: str
    frame_indices: list[int]
    frame_tags: list[set[int]]
    raw_track: AuditTrack
    smoothed_track: AuditTrack
    geojson: dict
    skipped_frames: list[int] = field(default_factory=list)


def run_audit(
    frames,
    model,
    thresholds: ThresholdTable,
    window: int = DEFAULT_WINDOW,
    severity_floor: float = DEFAULT_SEVERITY_FLOOR,
    grade_cuts: tuple[float, float] = DEFAULT_GRADE_CUTS,
    hard_gate: bool = False,
) -> AuditResult:
    """Segment, tag, and score a sequence frame by frame.

    frames may be a lazy iterator; each frame is processed and released
    before the next one loads, so memory stays bounded for long sequences.
    A frame whose inference fails is skipped and logged as a gap.  model is
    an nn.Module, or any callable Frame -> mask (e.g. a ground-truth oracle).
    """
    if isinstance(model, nn.Module):
        def infer(frame):
            return predict_mask(model, frame.image, hard_gate=hard_gate)
    elif callable(model):
        infer = model
    else:
        raise ConfigError(f"model must be a network or callable, got {type(model)}")
    sequence_id = None
    indices: list[int] = []
    tags: list[set[int]] = []
    records: list[SeverityRecord] = []
    skipped: list[int] = []
    for frame in frames:
        if sequence_id is None:
            sequence_id = frame.sequence_id
        try:
            mask = infer(frame)
        except Exception as e:  # inference failure: log the gap, keep going
            warnings.warn(f"frame {frame.index} skipped: {e}", RuntimeWarning)
            skipped.append(frame.index)
            continue
        indices.append(frame.index)
        tags.append(tag_frame(mask, thresholds))
        records.append(SeverityRecord(frame.gps, frame.index, severity(mask)))
    raw = AuditTrack(sequence_id or "", records)
    smoothed = smooth_track(raw, window)
    return AuditResult(
        sequence_id=sequence_id or "",
        frame_indices=indices,
        frame_tags=tags,
        raw_track=raw,
        smoothed_track=smoothed,
        geojson=emit_map([smoothed], severity_floor, grade_cuts),
        skipped_frames=skipped,
    )


# ---------------------------------------------------------------------------
# Persistence


def write_geojson(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def write_severity_csv(raw: AuditTrack, smoothed: AuditTrack, path) -> None:
    """One row per (frame, class): raw and smoothed severity side by side."""
    if len(raw.records) != len(smoothed.records):
        raise DataError("raw and smoothed tracks differ in length")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sequence_id", "frame_index", "lat", "lon", "class", "raw", "smoothed"]
        )
        for r, s in zip(raw.records, smoothed.records):
            for c in sorted(r.per_class_severity):
                writer.writerow([
                    raw.sequence_id, r.frame_index, r.gps.lat, r.gps.lon,
                    class_name(c), r.per_class_severity[c],
                    s.per_class_severity[c],
                ])
