"""Shared fixtures and brute-force oracles.

The oracles here recompute expected values by the most literal method
available (nested loops, direct recounts) so the vectorized implementations
are checked against something independent.
"""

import numpy as np
import pytest

from roadaudit import dataset
from roadaudit.taxonomy import NUM_CLASSES

# ---------------------------------------------------------------------------
# Oracles


def confusion_oracle(gt: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    """Nested-loop confusion counts: rows gt, cols pred, void gt skipped."""
    counts = np.zeros((k, k), dtype=np.int64)
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            if gt[i, j] != 0:
                counts[gt[i, j], pred[i, j]] += 1
    return counts


def iou_oracle(counts: np.ndarray, c: int):
    """IoU from a confusion grid by direct summation; None when undefined."""
    inter = counts[c, c]
    union = counts[c, :].sum() + counts[:, c].sum() - inter
    return None if union == 0 else inter / union


def mean_iou_oracle(counts: np.ndarray, evaluated) -> float:
    ious = [iou_oracle(counts, c) for c in evaluated if counts[c, :].sum() > 0]
    return sum(ious) / len(ious)


def weighted_iou_oracle(counts: np.ndarray, evaluated) -> float:
    present = [c for c in evaluated if counts[c, :].sum() > 0]
    total = sum(counts[c, :].sum() for c in present)
    return sum(counts[c, :].sum() / total * iou_oracle(counts, c) for c in present)


def aggregate_oracle(counts: np.ndarray, table: np.ndarray, k_out: int) -> np.ndarray:
    """Sum a fine confusion grid into a coarse one by a label-mapping table."""
    out = np.zeros((k_out, k_out), dtype=np.int64)
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            out[table[i], table[j]] += counts[i, j]
    return out


def f1_oracle(pred_positive, gt_positive) -> float:
    tp = sum(1 for p, g in zip(pred_positive, gt_positive) if p and g)
    fp = sum(1 for p, g in zip(pred_positive, gt_positive) if p and not g)
    fn = sum(1 for p, g in zip(pred_positive, gt_positive) if not p and g)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def best_threshold_oracle(values, gt_positive, grid) -> tuple[float, float]:
    """Exhaustive grid evaluation; ties go to the larger threshold."""
    best_f1, best_thr = -1.0, None
    for thr in sorted(grid):
        f1 = f1_oracle([v >= thr for v in values], gt_positive)
        if f1 >= best_f1:
            best_f1, best_thr = f1, thr
    return best_thr, best_f1


def moving_average_oracle(series, window) -> list[float]:
    """Centered moving average with shrinking edge windows, by slicing."""
    r = window // 2
    out = []
    for i in range(len(series)):
        chunk = series[max(0, i - r):i + r + 1]
        out.append(sum(chunk) / len(chunk))
    return out


def random_mask(rng: np.random.Generator, shape=(8, 8), k=NUM_CLASSES) -> np.ndarray:
    return rng.integers(0, k, size=shape).astype(np.uint8)


# ---------------------------------------------------------------------------
# Fixtures


@pytest.fixture(scope="session")
def toy_scene() -> dataset.SceneConfig:
    return dataset.SceneConfig(sequence_id="toyseq", n_frames=8, width=128, height=64)


@pytest.fixture(scope="session")
def toy_sequence(toy_scene) -> dataset.DriveSequence:
    return dataset.generate_synthetic_sequence(toy_scene, seed=11)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
