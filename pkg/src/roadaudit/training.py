"""Losses, road ground truth, and the two-step training schedule.

Step 1 trains the road subnetwork alone (binary road-vs-background targets
derived from the class masks) until validation road mIoU reaches a target;
step 2 attaches the defect subnetwork and optimizes both jointly with
total loss = road cross-entropy + defect cross-entropy.  Everything is
deterministic for a fixed seed: fixed initialization, fixed batch order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .dataset import Frame
from .errors import ConfigError, NumericalError, TrainingDiverged
from .models import BaselineNet, CascadeModel, save_checkpoint, to_input_tensor
from .taxonomy import NUM_CLASSES, HierarchyLevel

VOID_ID = 0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 14
    input_size: tuple[int, int] = (1024, 512)  # (width, height)
    road_phase_target: float = 0.85  # val road mIoU that ends step 1
    max_epochs: int = 100  # per step
    train_miou_target: float | None = None  # early stop on train defect mIoU
    class_weights: tuple[float, ...] | None = None  # defect CE weights
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        w, h = self.input_size
        if w % 8 or h % 8 or w <= 0 or h <= 0:
            raise ConfigError(f"input_size {w}x{h} must be positive and divisible by 8")
        if not 0 < self.road_phase_target <= 1:
            raise ConfigError(
                f"road_phase_target must be in (0, 1], got {self.road_phase_target}"
            )
        if self.class_weights is not None and len(self.class_weights) != NUM_CLASSES:
            raise ConfigError(f"class_weights needs {NUM_CLASSES} entries")


def toy_train_config(**overrides) -> TrainConfig:
    """Defaults sized for desk-scale synthetic experiments."""
    base = dict(batch_size=4, input_size=(128, 64), max_epochs=150)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# Targets and loss


def road_ground_truth(mask: np.ndarray) -> np.ndarray:
    """Binary road target: positive wherever anything is annotated (the union
    of road surfaces and every defect); void stays negative."""
    mask = np.asarray(mask)
    if ((mask < 0) | (mask >= NUM_CLASSES)).any():
        raise ValueError(f"mask holds ids outside [0, {NUM_CLASSES})")
    return (mask != VOID_ID).astype(np.uint8)


def masked_cross_entropy(
    logits: torch.Tensor,
    targets: torch.Tensor,
    void_id: int | None = VOID_ID,
    class_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean cross-entropy per pixel, skipping void targets.

    void_id=None supervises every pixel (the road head's binary task has no
    void).  An all-void target yields 0 with a warning.  Non-finite logits
    raise immediately rather than silently poisoning the optimizer.
    """
    if not torch.isfinite(logits).all():
        raise NumericalError("non-finite logits in loss")
    if void_id is None:
        return F.cross_entropy(logits, targets, weight=class_weights)
    if (targets == void_id).all():
        warnings.warn("loss over an all-void target; defined as 0", RuntimeWarning)
        return logits.sum() * 0.0
    return F.cross_entropy(logits, targets, weight=class_weights,
                           ignore_index=void_id)


def inverse_frequency_weights(masks: list[np.ndarray]) -> torch.Tensor:
    """Optional defect-loss weights: w(c) proportional to 1/pixel-frequency,
    normalized to mean 1 over present classes; absent classes and void get 0."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for m in masks:
        counts += np.bincount(np.asarray(m).ravel(), minlength=NUM_CLASSES)
    counts[VOID_ID] = 0
    w = np.zeros(NUM_CLASSES, dtype=np.float64)
    present = counts > 0
    w[present] = 1.0 / counts[present]
    w[present] *= present.sum() / w[present].sum()
    return torch.from_numpy(w).float()


# ---------------------------------------------------------------------------
# History


@dataclass
class EpochRecord:
    step: str
    epoch: int
    total_loss: float
    road_loss: float | None = None
    defect_loss: float | None = None
    val_road_miou: float | None = None
    val_defect_miou: float | None = None
    train_defect_miou: float | None = None


_CSV_FIELDS = [f.strip() for f in (
    "step, epoch, total_loss, road_loss, defect_loss, "
    "val_road_miou, val_defect_miou, train_defect_miou"
).split(",")]


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def epochs_in(self, step: str) -> int:
        return sum(1 for r in self.records if r.step == step)

    @property
    def total_epochs(self) -> int:
        return len(self.records)

    def final(self, field_name: str):
        for r in reversed(self.records):
            value = getattr(r, field_name)
            if value is not None:
                return value
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: ("" if v is None else v)
                                 for k, v in asdict(r).items()})


# ---------------------------------------------------------------------------
# Data staging and evaluation helpers


def _prepare(frames: list[Frame], config: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack frames into (N,3,H,W) float inputs and (N,H,W) long class targets,
    resizing to config.input_size when the frames differ from it."""
    if not frames:
        raise ConfigError("empty frame list")
    w, h = config.input_size
    xs, ys = [], []
    for f in frames:
        x = to_input_tensor(f.image)
        y = torch.from_numpy(f.mask.astype(np.int64))[None, None]
        if x.shape[-2:] != (h, w):
            x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
            y = F.interpolate(y.float(), size=(h, w), mode="nearest").long()
        xs.append(x)
        ys.append(y[:, 0])
    return torch.cat(xs), torch.cat(ys)


def binary_miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean IoU of the 2-class road task over classes present in gt."""
    ious = []
    for c in (0, 1):
        if (gt == c).any():
            inter = int(((pred == c) & (gt == c)).sum())
            union = int(((pred == c) | (gt == c)).sum())
            ious.append(inter / union)
    return float(np.mean(ious))


@torch.no_grad()
def _eval_road_miou(road_net, x: torch.Tensor, road_gt: torch.Tensor) -> float:
    road_net.eval()
    pred = road_net(x).argmax(dim=1).cpu().numpy()
    road_net.train()
    return binary_miou(pred, road_gt.cpu().numpy())


@torch.no_grad()
def defect_miou(model, x: torch.Tensor, class_gt: torch.Tensor) -> float:
    """Class-level mIoU of a model's argmax masks against class targets."""
    was_training = model.training
    model.eval()
    logits = model(x)[1] if isinstance(model, CascadeModel) else model(x)
    model.train(was_training)
    pred = logits.argmax(dim=1).cpu().numpy().astype(np.uint8)
    cm = metrics.ConfusionMatrix(HierarchyLevel.CLASS_FULL)
    for p, g in zip(pred, class_gt.cpu().numpy().astype(np.uint8)):
        cm.accumulate(g, p)
    return metrics.mean_iou(cm)


# ---------------------------------------------------------------------------
# Training loops


def _run_epochs(
    step: str,
    model,
    parameters,
    batch_loss,
    after_epoch,
    n_examples: int,
    config: TrainConfig,
    history: TrainingHistory,
    rng: np.random.Generator,
    checkpoint_path=None,
    checkpoint_every: int = 0,
) -> None:
    """Shared epoch loop: permuted batches, loss bookkeeping, divergence abort.

    batch_loss(idx) -> (total tensor, components dict); after_epoch(record) ->
    True to stop early.
    """
    optimizer = torch.optim.Adam(parameters, lr=config.learning_rate)
    model.train()
    for epoch in range(config.max_epochs):
        order = rng.permutation(n_examples)
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, n_examples, config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            try:
                total, components = batch_loss(idx)
                if not torch.isfinite(total):
                    raise NumericalError("loss became non-finite")
            except NumericalError as e:
                diverged = TrainingDiverged(epoch, f"{step}: {e}")
                diverged.history = history  # partial history for the caller
                raise diverged from e
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            n_batches += 1
            sums["total_loss"] = sums.get("total_loss", 0.0) + total.detach().item()
            for k, v in components.items():
                sums[k] = sums.get(k, 0.0) + v
        record = EpochRecord(
            step=step, epoch=epoch,
            **{k: v / n_batches for k, v in sums.items()},
        )
        history.records.append(record)
        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
        if after_epoch(record):
            break
    model.eval()


def train_two_step(
    model: CascadeModel,
    train_frames: list[Frame],
    val_frames: list[Frame],
    config: TrainConfig,
    checkpoint_path=None,
    checkpoint_every: int = 0,
) -> TrainingHistory:
    """Road subnet first, then both subnets jointly; returns the history."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    x, y_class = _prepare(train_frames, config)
    y_road = torch.from_numpy(
        np.stack([road_ground_truth(m) for m in y_class.numpy()])
    ).long()
    xv, yv_class = _prepare(val_frames, config)
    yv_road = torch.from_numpy(
        np.stack([road_ground_truth(m) for m in yv_class.numpy()])
    ).long()
    weights = (torch.tensor(config.class_weights, dtype=torch.float32)
               if config.class_weights else None)
    history = TrainingHistory()
    kwargs = dict(checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every)

    # Step 1: road subnetwork alone.  The defect subnet is neither forwarded
    # nor in the optimizer, so its parameters stay bit-identical.
    def road_batch(idx):
        loss = masked_cross_entropy(model.road(x[idx]), y_road[idx], void_id=None)
        return loss, {"road_loss": loss.detach().item()}

    def road_after(record: EpochRecord):
        record.val_road_miou = _eval_road_miou(model.road, xv, yv_road)
        return record.val_road_miou >= config.road_phase_target

    _run_epochs("road", model, model.road.parameters(), road_batch, road_after,
                len(x), config, history, rng, **kwargs)
    reached = history.final("val_road_miou")
    if reached is None or reached < config.road_phase_target:
        note = (f"step 1 ended at val road mIoU {reached:.3f} below target "
                f"{config.road_phase_target}; continuing to step 2")
        history.notes.append(note)
        warnings.warn(note, RuntimeWarning)

    _joint_phase("joint", model, x, y_class, y_road, xv, yv_class, config,
                 history, rng, weights, **kwargs)
    return history


def _joint_phase(step, model, x, y_class, y_road, xv, yv_class, config, history,
                 rng, weights, **kwargs):
    def joint_batch(idx):
        road_logits, defect_logits = model(x[idx])
        road_loss = masked_cross_entropy(road_logits, y_road[idx], void_id=None)
        defect_loss = masked_cross_entropy(defect_logits, y_class[idx],
                                           class_weights=weights)
        return road_loss + defect_loss, {"road_loss": road_loss.detach().item(),
                                         "defect_loss": defect_loss.detach().item()}

    def joint_after(record: EpochRecord):
        record.val_defect_miou = defect_miou(model, xv, yv_class)
        if config.train_miou_target is None:
            return False
        record.train_defect_miou = defect_miou(model, x, y_class)
        return record.train_defect_miou >= config.train_miou_target

    _run_epochs(step, model, model.parameters(), joint_batch, joint_after,
                len(x), config, history, rng, **kwargs)


def train_joint(
    model: CascadeModel,
    train_frames: list[Frame],
    val_frames: list[Frame],
    config: TrainConfig,
    **kwargs,
) -> TrainingHistory:
    """Both subnets from scratch in one phase (the two-step ablation's rival)."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    x, y_class = _prepare(train_frames, config)
    y_road = torch.from_numpy(
        np.stack([road_ground_truth(m) for m in y_class.numpy()])
    ).long()
    xv, yv_class = _prepare(val_frames, config)
    weights = (torch.tensor(config.class_weights, dtype=torch.float32)
               if config.class_weights else None)
    history = TrainingHistory()
    _joint_phase("joint", model, x, y_class, y_road, xv, yv_class, config,
                 history, rng, weights, **kwargs)
    return history


def train_baseline(
    model: BaselineNet,
    train_frames: list[Frame],
    val_frames: list[Frame],
    config: TrainConfig,
    **kwargs,
) -> TrainingHistory:
    """Single-stage defect training for the non-cascaded baseline."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    x, y_class = _prepare(train_frames, config)
    xv, yv_class = _prepare(val_frames, config)
    weights = (torch.tensor(config.class_weights, dtype=torch.float32)
               if config.class_weights else None)
    history = TrainingHistory()

    def batch(idx):
        loss = masked_cross_entropy(model(x[idx]), y_class[idx],
                                    class_weights=weights)
        return loss, {"defect_loss": loss.detach().item()}

    def after(record: EpochRecord):
        record.val_defect_miou = defect_miou(model, xv, yv_class)
        if config.train_miou_target is None:
            return False
        record.train_defect_miou = defect_miou(model, x, y_class)
        return record.train_defect_miou >= config.train_miou_target

    _run_epochs("baseline", model, model.parameters(), batch, after,
                len(x), config, history, rng, **kwargs)
    return history
