"""Segmentation networks: road subnet, defect subnet with spatial feature
pooling, the attention-gated cascade, and a single-stage baseline.

All nets share one encoder/decoder skeleton built from factorized residual
blocks (3x1 then 1x3 convolution pairs with a residual skip).  Three
downsampler stages give a total stride of exactly 8; the decoder mirrors it
with transposed convolutions.  Inputs are float images in [0, 1], layout
(B, 3, H, W) with H and W divisible by 8.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .taxonomy import NUM_CLASSES

DOWNSAMPLE_FACTOR = 8
DEFAULT_SCALES = (1, 2, 4, 8)


@dataclass(frozen=True)
class BackboneSpec:
    """Channel widths and block counts for one encoder/decoder backbone."""

    widths: tuple[int, int, int] = (16, 64, 128)
    mid_blocks: int = 5
    deep_blocks: int = 8
    decoder_blocks: int = 2
    dilations: tuple[int, ...] = (2, 4, 8, 16)
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.widths) != 3 or self.widths[0] <= 3 or any(
            b <= a for a, b in zip(self.widths, self.widths[1:])
        ):
            raise ConfigError(f"widths must be 3 increasing values > 3, got {self.widths}")
        if min(self.mid_blocks, self.deep_blocks, self.decoder_blocks) < 1:
            raise ConfigError("block counts must be >= 1")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def halved(self) -> "BackboneSpec":
        """The shortened variant used for the road subnet: half the blocks."""
        return replace(
            self,
            mid_blocks=max(1, self.mid_blocks // 2),
            deep_blocks=max(1, self.deep_blocks // 2),
            decoder_blocks=max(1, self.decoder_blocks // 2),
        )


FULL_SPEC = BackboneSpec()
TOY_SPEC = BackboneSpec(widths=(16, 32, 64), mid_blocks=2, deep_blocks=2,
                        decoder_blocks=1)
GRADCHECK_SPEC = BackboneSpec(widths=(4, 8, 16), mid_blocks=1, deep_blocks=1,
                              decoder_blocks=1, dilations=(2,))


class DownsamplerBlock(nn.Module):
    """Stride-2 conv concatenated with max-pool, as in the reference encoder."""

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        if n_out <= n_in:
            raise ConfigError(f"downsampler needs n_out > n_in, got {n_in}->{n_out}")
        self.conv = nn.Conv2d(n_in, n_out - n_in, 3, stride=2, padding=1)
        self.pool = nn.MaxPool2d(2, stride=2)
        self.bn = nn.BatchNorm2d(n_out, eps=1e-3)

    def forward(self, x):
        return F.relu(self.bn(torch.cat([self.conv(x), self.pool(x)], dim=1)))


class FactorizedResidualBlock(nn.Module):
    """Two 3x1/1x3 convolution pairs with a residual skip; second pair dilated.

    Shape-preserving: output spatial dims and channel count equal the input's.
    """

    def __init__(self, channels: int, dilation: int = 1, dropout: float = 0.0):
        super().__init__()
        if dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {dilation}")
        self.conv3x1_1 = nn.Conv2d(channels, channels, (3, 1), padding=(1, 0))
        self.conv1x3_1 = nn.Conv2d(channels, channels, (1, 3), padding=(0, 1))
        self.bn1 = nn.BatchNorm2d(channels, eps=1e-3)
        self.conv3x1_2 = nn.Conv2d(channels, channels, (3, 1),
                                   padding=(dilation, 0), dilation=(dilation, 1))
        self.conv1x3_2 = nn.Conv2d(channels, channels, (1, 3),
                                   padding=(0, dilation), dilation=(1, dilation))
        self.bn2 = nn.BatchNorm2d(channels, eps=1e-3)
        self.dropout = nn.Dropout2d(dropout) if dropout > 0 else None

    def forward(self, x):
        out = F.relu(self.conv3x1_1(x))
        out = F.relu(self.bn1(self.conv1x3_1(out)))
        out = F.relu(self.conv3x1_2(out))
        out = self.bn2(self.conv1x3_2(out))
        if self.dropout is not None:
            out = self.dropout(out)
        return F.relu(out + x)


class UpsamplerBlock(nn.Module):
    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.conv = nn.ConvTranspose2d(n_in, n_out, 3, stride=2, padding=1,
                                       output_padding=1)
        self.bn = nn.BatchNorm2d(n_out, eps=1e-3)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class Encoder(nn.Module):
    """3 downsampling stages (stride 8 total) interleaved with residual blocks."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        w1, w2, w3 = spec.widths
        layers: list[nn.Module] = [DownsamplerBlock(3, w1), DownsamplerBlock(w1, w2)]
        layers += [FactorizedResidualBlock(w2, 1, spec.dropout)
                   for _ in range(spec.mid_blocks)]
        layers.append(DownsamplerBlock(w2, w3))
        for i in range(spec.deep_blocks):
            dilation = spec.dilations[i % len(spec.dilations)]
            layers.append(FactorizedResidualBlock(w3, dilation, spec.dropout))
        self.stages = nn.Sequential(*layers)
        self.out_channels = w3

    def forward(self, x):
        return self.stages(x)


class Decoder(nn.Module):
    """Mirror of the encoder; the final transposed conv is the class head."""

    def __init__(self, spec: BackboneSpec, num_classes: int, in_channels: int | None = None):
        super().__init__()
        w1, w2, w3 = spec.widths
        layers: list[nn.Module] = [UpsamplerBlock(in_channels or w3, w2)]
        layers += [FactorizedResidualBlock(w2) for _ in range(spec.decoder_blocks)]
        layers.append(UpsamplerBlock(w2, w1))
        layers += [FactorizedResidualBlock(w1) for _ in range(spec.decoder_blocks)]
        self.stages = nn.Sequential(*layers)
        self.head = nn.ConvTranspose2d(w1, num_classes, 2, stride=2)

    def forward(self, x):
        return self.head(self.stages(x))


def _check_input(x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise DataError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
    h, w = x.shape[2:]
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise DataError(
            f"input {h}x{w} not divisible by the total stride {DOWNSAMPLE_FACTOR}"
        )


class RoadSegNet(nn.Module):
    """Road-vs-background segmenter: (B, 3, H, W) -> (B, 2, H, W) logits."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec, 2)

    def forward(self, x):
        _check_input(x)
        return self.decoder(self.encoder(x))


class SpatialFeaturePooling(nn.Module):
    """Multi-scale average pooling, projected and upsampled back.

    Each scale s pools the map to an s x s grid, applies a 1x1 projection to
    proj_channels, and bilinearly upsamples to the input size; the branches
    are concatenated with the input, giving
    out_channels = channels + len(scales) * proj_channels.
    """

    def __init__(self, channels: int, scales: tuple[int, ...] = DEFAULT_SCALES,
                 proj_channels: int | None = None, identity_projection: bool = False):
        super().__init__()
        if not scales or any(s < 1 for s in scales):
            raise ConfigError(f"scales must be positive, got {scales}")
        self.scales = tuple(scales)
        self.identity_projection = identity_projection
        if identity_projection:
            proj_channels = channels
            self.projections = nn.ModuleList(nn.Identity() for _ in self.scales)
        else:
            proj_channels = proj_channels or max(1, channels // 4)
            self.projections = nn.ModuleList(
                nn.Conv2d(channels, proj_channels, 1) for _ in self.scales
            )
        self.out_channels = channels + len(self.scales) * proj_channels

    def forward(self, x):
        h, w = x.shape[2:]
        if max(self.scales) > min(h, w):
            raise DataError(
                f"pooling scale {max(self.scales)} exceeds feature map {h}x{w}"
            )
        branches = [x]
        for scale, proj in zip(self.scales, self.projections):
            pooled = proj(F.adaptive_avg_pool2d(x, scale))
            branches.append(F.interpolate(pooled, size=(h, w), mode="bilinear",
                                          align_corners=False))
        return torch.cat(branches, dim=1)


class DefectSegNet(nn.Module):
    """Defect segmenter with spatial feature pooling between encoder and
    decoder: (B, 3, H, W) -> (B, 11, H, W) logits."""

    def __init__(self, spec: BackboneSpec, scales: tuple[int, ...] = DEFAULT_SCALES):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.pooling = SpatialFeaturePooling(self.encoder.out_channels, scales)
        self.decoder = Decoder(spec, NUM_CLASSES, in_channels=self.pooling.out_channels)

    def forward(self, x):
        _check_input(x)
        return self.decoder(self.pooling(self.encoder(x)))


def attention_apply(image: torch.Tensor, road_prob: torch.Tensor) -> torch.Tensor:
    """Soft gate: gated[p, ch] = image[p, ch] * road_prob[p].

    road_prob is broadcast over the channel axis; values must lie in [0, 1].
    Differentiable in both factors.
    """
    if road_prob.ndim == image.ndim - 1:
        road_prob = road_prob.unsqueeze(-3)
    if road_prob.shape[-2:] != image.shape[-2:] or road_prob.shape[-3] != 1:
        raise DataError(
            f"gate shape {tuple(road_prob.shape)} does not broadcast over "
            f"image {tuple(image.shape)}"
        )
    if ((road_prob < 0) | (road_prob > 1)).any():
        raise DataError("road probabilities outside [0, 1]")
    return image * road_prob


class CascadeModel(nn.Module):
    """Road subnet -> soft attention gate -> defect subnet.

    The gate multiplies the input image by the road-channel softmax
    probability, so defect-loss gradients reach the road subnet.  hard_gate
    binarizes the gate at 0.5 (inference-time option; not differentiable).
    """

    def __init__(self, defect_spec: BackboneSpec = FULL_SPEC,
                 road_spec: BackboneSpec | None = None,
                 scales: tuple[int, ...] = DEFAULT_SCALES):
        super().__init__()
        self.road = RoadSegNet(road_spec if road_spec is not None
                               else defect_spec.halved())
        self.defect = DefectSegNet(defect_spec, scales)
        self.scales = tuple(scales)

    def road_probability(self, road_logits: torch.Tensor) -> torch.Tensor:
        return F.softmax(road_logits, dim=1)[:, 1:2]

    def forward(self, x, hard_gate: bool = False):
        road_logits = self.road(x)
        prob = self.road_probability(road_logits)
        if hard_gate:
            prob = (prob > 0.5).to(prob.dtype)
        defect_logits = self.defect(attention_apply(x, prob))
        return road_logits, defect_logits


class BaselineNet(nn.Module):
    """Single-stage defect segmenter: same backbone, no cascade, no pooling."""

    def __init__(self, spec: BackboneSpec = FULL_SPEC):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec, NUM_CLASSES)

    def forward(self, x):
        _check_input(x)
        return self.decoder(self.encoder(x))


# ---------------------------------------------------------------------------
# Inference and bookkeeping helpers


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def to_input_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 image -> float32 (1, 3, H, W) in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected HxWx3 image, got {image.shape}")
    arr = np.ascontiguousarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def logits_to_mask(defect_logits: torch.Tensor) -> np.ndarray:
    """Per-pixel argmax over the class axis -> uint8 mask (batch squeezed)."""
    mask = defect_logits.argmax(dim=1).to(torch.uint8).cpu().numpy()
    return mask[0] if mask.shape[0] == 1 else mask


@torch.no_grad()
def predict_mask(model: nn.Module, image: np.ndarray, hard_gate: bool = False) -> np.ndarray:
    """Run one uint8 frame through a trained model and return the class mask."""
    was_training = model.training
    model.eval()
    try:
        x = to_input_tensor(image)
        if isinstance(model, CascadeModel):
            _, logits = model(x, hard_gate=hard_gate)
        else:
            logits = model(x)
        return logits_to_mask(logits)
    finally:
        model.train(was_training)


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(model: nn.Module, path, extra: dict | None = None) -> None:
    """Single-archive checkpoint: version tag, config record, named tensors."""
    if isinstance(model, CascadeModel):
        kind = "cascade"
        config = {"defect_spec": asdict(model.defect.spec),
                  "road_spec": asdict(model.road.spec),
                  "scales": list(model.scales)}
    elif isinstance(model, BaselineNet):
        kind = "baseline"
        config = {"spec": asdict(model.spec)}
    else:
        raise ConfigError(f"cannot checkpoint a {type(model).__name__}")
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def _spec_from_dict(d: dict) -> BackboneSpec:
    return BackboneSpec(
        widths=tuple(d["widths"]),
        mid_blocks=d["mid_blocks"],
        deep_blocks=d["deep_blocks"],
        decoder_blocks=d["decoder_blocks"],
        dilations=tuple(d["dilations"]),
        dropout=d["dropout"],
    )


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    """Rebuild the model from its config record; names/shapes must match
    exactly."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise DataError(f"no checkpoint at {path}") from None
    except Exception as e:
        raise DataError(f"unreadable checkpoint {path}: {e}") from e
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint version {payload.get('format_version')!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    config = payload["config"]
    if payload["kind"] == "cascade":
        model = CascadeModel(
            defect_spec=_spec_from_dict(config["defect_spec"]),
            road_spec=_spec_from_dict(config["road_spec"]),
            scales=tuple(config["scales"]),
        )
    elif payload["kind"] == "baseline":
        model = BaselineNet(_spec_from_dict(config["spec"]))
    else:
        raise DataError(f"unknown checkpoint kind {payload['kind']!r}")
    try:
        model.load_state_dict(payload["state"], strict=True)
    except RuntimeError as e:
        raise DataError(f"checkpoint state does not fit its config: {e}") from e
    model.eval()
    return model, payload["extra"]
