"""Drive sequences on disk, synthetic scene generation, and stratified splits.

A drive sequence is stored as::

    <seq_id>/manifest.json          {sequence_id, frames: [{index, gps}]}
    <seq_id>/img/<index>.png        RGB, lossless
    <seq_id>/mask/<index>.png       single-channel class ids

The synthetic generator paints a road trapezoid on a sky/grass background and
plants textured defect regions with known ground truth, so a small model can
learn each class from its colour/texture signature alone.  Everything is
deterministic given (config, seed); per-frame randomness is derived from
order-independent sub-seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .taxonomy import NUM_CLASSES, ClassId

# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class GpsFix:
    lat: float
    lon: float

    def __post_init__(self):
        for name, value, lim in (("lat", self.lat, 90.0), ("lon", self.lon, 180.0)):
            if not math.isfinite(value) or abs(value) > lim:
                raise DataError(f"{name}={value!r} outside [-{lim}, {lim}]")


@dataclass(eq=False)
class Frame:
    sequence_id: str
    index: int
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8 class ids
    gps: GpsFix

    def __post_init__(self):
        if self.index < 0:
            raise DataError(f"frame index {self.index} is negative")
        img, mask = self.image, self.mask
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise DataError(f"image must be HxWx3 uint8, got {img.shape} {img.dtype}")
        if mask.shape != img.shape[:2]:
            raise DataError(f"mask {mask.shape} does not match image {img.shape[:2]}")
        if mask.dtype != np.uint8:
            raise DataError(f"mask must be uint8, got {mask.dtype}")
        if (mask >= NUM_CLASSES).any():
            bad = int(mask.max())
            raise DataError(f"mask holds class id {bad} outside [0, {NUM_CLASSES})")


@dataclass(eq=False)
class DriveSequence:
    sequence_id: str
    frames: list[Frame]

    def __post_init__(self):
        for want, frame in enumerate(self.frames):
            if frame.index != want:
                raise DataError(
                    f"frame indices must be contiguous from 0; "
                    f"position {want} holds index {frame.index}"
                )
            if frame.sequence_id != self.sequence_id:
                raise DataError(
                    f"frame {frame.index} belongs to {frame.sequence_id!r}, "
                    f"not {self.sequence_id!r}"
                )

    def __len__(self) -> int:
        return len(self.frames)


def sequences_equal(a: DriveSequence, b: DriveSequence) -> bool:
    """Bit-exact comparison (ids, GPS, images, masks)."""
    if a.sequence_id != b.sequence_id or len(a) != len(b):
        return False
    return all(
        fa.index == fb.index
        and fa.gps == fb.gps
        and np.array_equal(fa.image, fb.image)
        and np.array_equal(fa.mask, fb.mask)
        for fa, fb in zip(a.frames, b.frames)
    )


# ---------------------------------------------------------------------------
# Synthetic scene generation

# Per-class paint style: flat base colour + gaussian noise + optional stripes.
# Colours are deliberately far apart so texture/colour alone separates classes.
_SKY = (135, 190, 235)
_GRASS = (70, 150, 80)

_STYLES: dict[int, tuple[tuple[int, int, int], float, float, int, tuple[int, int]]] = {
    # class id: (base RGB, noise sigma, stripe amplitude, stripe period, stripe dir)
    ClassId.TAR_ROAD: ((70, 70, 75), 6.0, 0.0, 1, (0, 1)),
    ClassId.CEMENT_ROAD: ((175, 172, 165), 6.0, 0.0, 1, (0, 1)),
    ClassId.SHOULDER: ((180, 150, 90), 10.0, 0.0, 1, (0, 1)),
    ClassId.POTHOLE: ((25, 22, 20), 4.0, 0.0, 1, (0, 1)),
    ClassId.WATER_LOG: ((50, 110, 220), 3.0, 12.0, 3, (1, 0)),
    ClassId.WET_ROAD: ((60, 75, 110), 5.0, 0.0, 1, (0, 1)),
    ClassId.MUDDY_ROAD: ((125, 85, 45), 12.0, 0.0, 1, (0, 1)),
    ClassId.ROUGH_ROAD: ((120, 120, 120), 32.0, 0.0, 1, (0, 1)),
    ClassId.OBSTRUCTION: ((210, 60, 40), 4.0, 55.0, 4, (0, 1)),
    ClassId.BUMP: ((220, 200, 40), 4.0, 55.0, 6, (1, 1)),
}

_BODY_CLASSES = (int(ClassId.TAR_ROAD), int(ClassId.CEMENT_ROAD))
_DEFECT_CLASSES = tuple(range(int(ClassId.POTHOLE), NUM_CLASSES))


def default_frequencies() -> dict[int, float]:
    """Per-class appearance frequencies (body classes: relative frame weights;
    shoulder and defects: fraction of frames containing the class)."""
    freq = {int(ClassId.TAR_ROAD): 0.6, int(ClassId.CEMENT_ROAD): 0.4,
            int(ClassId.SHOULDER): 0.75}
    freq.update({c: 0.7 for c in _DEFECT_CLASSES})
    return freq


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of one synthetic drive sequence."""

    sequence_id: str = "seq000"
    n_frames: int = 10
    width: int = 128
    height: int = 64
    frequencies: dict[int, float] = field(default_factory=default_frequencies)
    gps_start: tuple[float, float] = (10.0, 20.0)  # (lat, lon) degrees
    gps_step: tuple[float, float] = (1e-5, 2e-5)  # per-frame increment

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image dims must be positive, got {self.width}x{self.height}")
        for c, f in self.frequencies.items():
            if not 1 <= int(c) < NUM_CLASSES:
                raise ConfigError(f"frequency for invalid class id {c}")
            if not (math.isfinite(f) and f >= 0):
                raise ConfigError(f"frequency for class {c} must be finite and >= 0")
        if sum(self.frequencies.get(c, 0.0) for c in _BODY_CLASSES) <= 0:
            raise ConfigError("at least one road surface class needs frequency > 0")


def _apportion(n: int, weights: list[float]) -> list[int]:
    """Largest-remainder split of n items; every positive weight gets >= 1
    when n allows."""
    total = sum(weights)
    raw = [n * w / total for w in weights]
    counts = [int(math.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        i = max(range(len(weights)), key=lambda j: (remainders[j], -j))
        counts[i] += 1
        remainders[i] = -1.0
    positive = [i for i, w in enumerate(weights) if w > 0]
    if n >= len(positive):
        for i in positive:
            if counts[i] == 0:
                donor = max(range(len(counts)), key=lambda j: counts[j])
                counts[donor] -= 1
                counts[i] += 1
    return counts


def _plan_sequence(config: SceneConfig, rng: np.random.Generator):
    """Decide per frame: body class, shoulder presence, planted defect classes.

    Quota-based so that every class with frequency > 0 appears in >= 1 frame
    (body classes need n_frames >= number of positive body classes).
    """
    n = config.n_frames
    freq = config.frequencies

    body_counts = _apportion(n, [freq.get(c, 0.0) for c in _BODY_CLASSES])
    order = rng.permutation(n)
    body = np.empty(n, dtype=np.int64)
    pos = 0
    for cls, count in zip(_BODY_CLASSES, body_counts):
        body[order[pos:pos + count]] = cls
        pos += count

    def quota(f: float) -> int:
        return min(n, max(1, round(f * n))) if f > 0 else 0

    shoulder = np.zeros(n, dtype=bool)
    k = quota(freq.get(int(ClassId.SHOULDER), 0.0))
    if k:
        shoulder[rng.choice(n, size=k, replace=False)] = True

    defects: list[list[int]] = [[] for _ in range(n)]
    for cls in _DEFECT_CLASSES:
        k = quota(freq.get(cls, 0.0))
        if k:
            for i in rng.choice(n, size=k, replace=False):
                defects[i].append(cls)
    return body, shoulder, defects


def _paint(img, mask, region, class_id, rng):
    n = int(region.sum())
    if n == 0:
        return
    color, noise, amp, period, direction = _STYLES[class_id]
    px = np.asarray(color, dtype=np.float64) + rng.normal(0.0, noise, size=(n, 3))
    if amp:
        rr, cc = np.nonzero(region)
        phase = (rr * direction[0] + cc * direction[1]) // period % 2
        px += amp * (2.0 * phase - 1.0)[:, None]
    img[region] = px
    mask[region] = class_id


def _render_frame(config: SceneConfig, body_class, has_shoulder, defect_classes,
                  rng: np.random.Generator):
    h, w = config.height, config.width
    img = np.empty((h, w, 3), dtype=np.float64)
    mask = np.zeros((h, w), dtype=np.uint8)

    horizon = int(round(0.30 * h))
    img[:horizon] = _SKY
    img[horizon:] = _GRASS
    img += rng.normal(0.0, 5.0, size=img.shape)

    # Road trapezoid: half-width grows linearly from the horizon to the bottom.
    rows = np.arange(h)[:, None].astype(np.float64)
    cols = np.arange(w)[None, :].astype(np.float64)
    depth = np.clip((rows - horizon) / max(h - 1 - horizon, 1), 0.0, 1.0)
    center = w / 2.0 + rng.uniform(-0.04, 0.04) * w
    half = (0.16 + 0.26 * depth) * w
    on_road_rows = rows >= horizon
    road = on_road_rows & (np.abs(cols - center) <= half)
    shoulder_w = 0.07 * w * (0.4 + 0.6 * depth)
    band = on_road_rows & (np.abs(cols - center) <= half + shoulder_w) & ~road

    if has_shoulder:
        _paint(img, mask, band, int(ClassId.SHOULDER), rng)
    _paint(img, mask, road, int(body_class), rng)

    # Defects live in disjoint column slots so planted classes never occlude
    # each other; each region is an ellipse clipped to the road surface.
    # Regions are deliberately chunky (hundreds of pixels) so they survive the
    # network's stride-8 bottleneck.
    planted = sorted(defect_classes)
    if planted:
        slots = rng.permutation(len(planted))
        lo_x = center - 0.9 * float(half[-1, 0])
        span = 1.8 * float(half[-1, 0]) / len(planted)
        for cls, slot in zip(planted, slots):
            x0 = lo_x + slot * span
            cx = x0 + span / 2 + rng.uniform(-0.1, 0.1) * span
            cy = rng.uniform(horizon + 0.55 * (h - horizon), h - 3)
            ry = max(4.0, 0.30 * (h - horizon)) * rng.uniform(0.85, 1.15)
            rx = max(4.0, span * 0.45) * rng.uniform(0.85, 1.15)
            ellipse = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
            region = ellipse & road
            if not region.any():  # clipped away entirely: drop a guaranteed blob
                cy, cx = h - 1 - ry, center
                ellipse = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
                region = ellipse & road
            _paint(img, mask, region, cls, rng)

    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, mask


def generate_synthetic_sequence(config: SceneConfig, seed: int) -> DriveSequence:
    """Render a deterministic synthetic drive sequence.

    Frame i's randomness comes from SeedSequence(seed).spawn child i+1, so
    frames could be rendered by concurrent workers in any order; child 0
    drives the global plan (which class appears in which frame).
    """
    children = np.random.SeedSequence(seed).spawn(config.n_frames + 1)
    body, shoulder, defects = _plan_sequence(config, np.random.default_rng(children[0]))

    lat0, lon0 = config.gps_start
    dlat, dlon = config.gps_step
    frames = []
    for i in range(config.n_frames):
        rng = np.random.default_rng(children[i + 1])
        img, mask = _render_frame(config, body[i], bool(shoulder[i]), defects[i], rng)
        frames.append(Frame(
            sequence_id=config.sequence_id,
            index=i,
            image=img,
            mask=mask,
            gps=GpsFix(lat0 + i * dlat, lon0 + i * dlon),
        ))
    return DriveSequence(config.sequence_id, frames)


# ---------------------------------------------------------------------------
# Annotation post-processing


def combine_masks(annotation: np.ndarray, object_mask: np.ndarray) -> np.ndarray:
    """Void out pixels an external road-scene segmenter marked as non-road.

    object_mask is boolean (or 0/1): True keeps the annotation label, False
    (vehicle/other object) forces void.
    """
    annotation = np.asarray(annotation)
    object_mask = np.asarray(object_mask).astype(bool)
    if annotation.shape != object_mask.shape:
        raise DataError(
            f"annotation {annotation.shape} vs object mask {object_mask.shape}"
        )
    return np.where(object_mask, annotation, 0).astype(annotation.dtype)


def all_road_object_mask(shape: tuple[int, int]) -> np.ndarray:
    """Built-in trivial provider: treat every pixel as road."""
    return np.ones(shape, dtype=bool)


# ---------------------------------------------------------------------------
# Stratified splitting


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)  # train, val, test
    # Relative per-class share deviation allowed between train and test.  Small
    # sets (a 3-frame test split) cannot do much better than ~0.2 even at the
    # combinatorial optimum, so the default leaves headroom; big sets land
    # around 0.02 in practice.
    tolerance: float = 0.25

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError(f"fractions must be 3 positive values, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions must sum to 1, got {sum(self.fractions)}")
        if not 0 < self.tolerance <= 1:
            raise ConfigError(f"tolerance must be in (0, 1], got {self.tolerance}")


_SHARE_EPS = 1e-9


def split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor each fraction, then hand remainder frames to train, val, test in
    that order."""
    sizes = [int(math.floor(n * f)) for f in fractions]
    for i in range(n - sum(sizes)):
        sizes[i % 3] += 1
    return tuple(sizes)


def _class_shares(counts: np.ndarray) -> np.ndarray:
    """Per-class pixel share within one split (void included in the total)."""
    return counts / max(counts.sum(), 1)


def stratified_split(
    sequences: list[DriveSequence],
    spec: SplitSpec,
    seed: int,
    restarts: int = 32,
) -> tuple[list[Frame], list[Frame], list[Frame]]:
    """Partition all frames into (train, val, test) so that every non-void
    class's pixel share is nearly equal between train and test:

        |share_train(c) - share_test(c)| / max(share_overall(c), 1e-9) <= tolerance

    Randomized search over assignments (random restarts, then first-improvement
    frame swaps between splits), deterministic given seed.
    """
    frames = [f for seq in sequences for f in seq.frames]
    n = len(frames)
    if n < 3:
        raise DataError(f"need >= 3 frames to split, got {n}")
    n_train, n_val, n_test = split_sizes(n, spec.fractions)
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(
            f"fractions {spec.fractions} give an empty split for {n} frames"
        )

    per_frame = np.stack(
        [np.bincount(f.mask.ravel(), minlength=NUM_CLASSES) for f in frames]
    ).astype(np.int64)
    overall = _class_shares(per_frame.sum(axis=0))
    classes = np.nonzero(per_frame.sum(axis=0)[1:])[0] + 1  # non-void, present

    def worst_rel(counts_tr: np.ndarray, counts_te: np.ndarray) -> float:
        rel = np.abs(
            _class_shares(counts_tr)[classes] - _class_shares(counts_te)[classes]
        ) / np.maximum(overall[classes], _SHARE_EPS)
        return float(rel.max()) if rel.size else 0.0

    def worst_class(counts_tr: np.ndarray, counts_te: np.ndarray) -> int:
        rel = np.abs(
            _class_shares(counts_tr)[classes] - _class_shares(counts_te)[classes]
        ) / np.maximum(overall[classes], _SHARE_EPS)
        return int(classes[int(rel.argmax())]) if rel.size else 0

    rng = np.random.default_rng(seed)
    best = (math.inf, None)
    for _ in range(max(1, restarts)):
        # Random restart, then first-improvement swaps between the three
        # splits until a local optimum (val swaps matter too: they move
        # frames in and out of the constrained train/test pools).
        perm = list(rng.permutation(n))
        groups = [perm[:n_train], perm[n_train:n_train + n_val],
                  perm[n_train + n_val:]]
        sums = [per_frame[g].sum(axis=0) for g in groups]
        score = worst_rel(sums[0], sums[2])
        improved = True
        while improved and score > spec.tolerance:
            improved = False
            for ga, gb in ((0, 2), (0, 1), (1, 2)):
                for i in range(len(groups[ga])):
                    for j in range(len(groups[gb])):
                        fa, fb = groups[ga][i], groups[gb][j]
                        sa = sums[ga] - per_frame[fa] + per_frame[fb]
                        sb = sums[gb] - per_frame[fb] + per_frame[fa]
                        trial = [sa if k == ga else sb if k == gb else sums[k]
                                 for k in range(3)]
                        cand = worst_rel(trial[0], trial[2])
                        if cand < score:
                            groups[ga][i], groups[gb][j] = fb, fa
                            sums[ga], sums[gb] = sa, sb
                            score = cand
                            improved = True
        if score <= spec.tolerance:
            return tuple([frames[i] for i in g] for g in groups)
        if score < best[0]:
            best = (score, worst_class(sums[0], sums[2]))

    raise DataError(
        f"no split within tolerance {spec.tolerance} after {restarts} "
        f"search restarts; worst class id {best[1]} deviates by {best[0]:.4f}"
    )


# ---------------------------------------------------------------------------
# Disk format


def save_sequence(seq: DriveSequence, root) -> Path:
    """Write one sequence under root/<sequence_id>/ and return that directory."""
    base = Path(root) / seq.sequence_id
    (base / "img").mkdir(parents=True, exist_ok=True)
    (base / "mask").mkdir(parents=True, exist_ok=True)
    manifest = {
        "sequence_id": seq.sequence_id,
        "frames": [
            {"index": f.index, "gps": {"lat": f.gps.lat, "lon": f.gps.lon}}
            for f in seq.frames
        ],
    }
    for f in seq.frames:
        Image.fromarray(f.image, mode="RGB").save(base / "img" / f"{f.index}.png")
        Image.fromarray(f.mask, mode="L").save(base / "mask" / f"{f.index}.png")
    (base / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return base


def _read_manifest(base: Path) -> dict:
    manifest_path = base / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"unreadable manifest {manifest_path}: {e}") from e
    if "sequence_id" not in manifest or "frames" not in manifest:
        raise DataError(f"manifest {manifest_path} lacks sequence_id/frames")
    return manifest


def _load_frame(base: Path, sequence_id: str, entry: dict) -> Frame:
    index = entry["index"]
    img_path = base / "img" / f"{index}.png"
    mask_path = base / "mask" / f"{index}.png"
    for p in (img_path, mask_path):
        if not p.is_file():
            raise DataError(f"manifest lists frame {index} but {p} is missing")
    image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.uint8)
    mask = np.asarray(Image.open(mask_path), dtype=np.uint8)
    if mask.ndim != 2:
        raise DataError(f"{mask_path} is not a single-channel mask")
    if (mask >= NUM_CLASSES).any():
        raise DataError(
            f"{mask_path} holds class id {int(mask.max())} outside [0, {NUM_CLASSES})"
        )
    return Frame(
        sequence_id=sequence_id,
        index=index,
        image=image,
        mask=mask,
        gps=GpsFix(entry["gps"]["lat"], entry["gps"]["lon"]),
    )


def iter_sequence_frames(path) -> Iterator[Frame]:
    """Yield frames one at a time; memory stays bounded for long sequences."""
    base = Path(path)
    manifest = _read_manifest(base)
    for entry in manifest["frames"]:
        yield _load_frame(base, manifest["sequence_id"], entry)


def load_sequence(path) -> DriveSequence:
    base = Path(path)
    manifest = _read_manifest(base)
    return DriveSequence(manifest["sequence_id"], list(iter_sequence_frames(base)))


def list_sequence_dirs(root) -> list[Path]:
    """All immediate subdirectories of root holding a manifest, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    return sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())
