"""Counting model builders: one monomodal column and three fusion variants.

Every variant reuses the same stage specs and the same regression head
family, so parameter and behavior differences come only from how the
modalities are combined:

- mono_rgb / mono_thermal: one column on a single modality.
- early: one column on channel-stacked inputs (4 channels by default, or 6
  with the thermal plane replicated to 3).
- late: two full columns, concatenated just before the final 1x1 projection.
- deep: modality-specific columns plus a shared column; after every backbone
  stage an aggregation/distribution exchange moves information into and out
  of the shared column, and the head reads the shared pyramid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (
    Backbone,
    BackboneConfig,
    FeaturePyramid,
    StageSpec,
    b0_config,
    encode,
    pad_to_stride,
    tiny4_config,
    tiny_config,
)
from .data import CrowdSample
from .errors import ConfigError, ValidationError
from .head import (
    DensityMap,
    DilatedBranches,
    HeadConfig,
    RegressionHead,
    aggregate,
    init_density_projection,
)

VARIANT_KINDS = ("mono_rgb", "mono_thermal", "early", "late", "deep")


@dataclass(frozen=True)
class ExchangeConfig:
    """Cross-modal exchange settings; one exchange per backbone stage, with
    exchange width equal to the stage width."""

    gating: str = "sigmoid"  # "sigmoid" or "identity"

    def __post_init__(self):
        if self.gating not in ("sigmoid", "identity"):
            raise ConfigError(f"unknown gating {self.gating!r}")


@dataclass(frozen=True)
class ModelVariant:
    kind: str
    backbone: BackboneConfig
    head: HeadConfig | None = None
    exchange: ExchangeConfig = field(default_factory=ExchangeConfig)
    six_channel_early: bool = False
    thermal_channels: int = 1

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown variant kind {self.kind!r}; expected one of {VARIANT_KINDS}")
        if self.thermal_channels not in (1, 3):
            raise ConfigError(f"thermal_channels must be 1 or 3, got {self.thermal_channels}")

    def resolved_head(self) -> HeadConfig:
        fused = sum(self.backbone.widths)
        if self.head is None:
            return HeadConfig(fused_width=fused)
        if self.head.fused_width != fused:
            raise ConfigError(
                f"head fused_width {self.head.fused_width} != sum of stage widths {fused}"
            )
        if self.head.output_stride != self.backbone.cumulative_strides[0]:
            raise ConfigError(
                f"head output_stride {self.head.output_stride} != stage-1 stride"
                f" {self.backbone.cumulative_strides[0]}"
            )
        return self.head


def tiny_variant(kind: str, **kw) -> ModelVariant:
    return ModelVariant(kind=kind, backbone=tiny_config(), **kw)


def tiny4_variant(kind: str, **kw) -> ModelVariant:
    return ModelVariant(kind=kind, backbone=tiny4_config(), **kw)


def b0_variant(kind: str, **kw) -> ModelVariant:
    return ModelVariant(kind=kind, backbone=b0_config(), **kw)


VARIANT_PRESETS = {"tiny": tiny_variant, "tiny4": tiny4_variant, "b0": b0_variant}


def sample_to_tensors(sample: CrowdSample) -> tuple[torch.Tensor, torch.Tensor]:
    """CrowdSample -> ((1, 3, H, W), (1, 1, H, W)) float32 tensors in [0, 1]."""
    rgb = torch.from_numpy(sample.rgb.astype(np.float32)).permute(2, 0, 1) / 255.0
    thermal = torch.from_numpy(sample.thermal.astype(np.float32))[None] / 255.0
    return rgb[None], thermal[None]


def _expand_thermal(thermal: torch.Tensor, channels: int) -> torch.Tensor:
    """Replicate a single thermal plane when a column wants 3 channels."""
    if thermal.shape[1] == channels:
        return thermal
    if thermal.shape[1] == 1 and channels == 3:
        return thermal.repeat(1, 3, 1, 1)
    raise ValidationError(
        f"thermal input has {thermal.shape[1]} channel(s), column expects {channels}"
    )


class CrossModalExchange(nn.Module):
    """Per-stage aggregation/distribution exchange.

    Aggregation updates the shared map from both modality-specific maps;
    distribution updates each specific map from the shared one. All updates
    are gated residuals, so shapes are preserved and zeroed exchange weights
    leave every map unchanged.
    """

    def __init__(self, width: int, gating: str = "sigmoid"):
        super().__init__()
        self.gating = gating
        self.aggregate = nn.Conv2d(2 * width, width, kernel_size=1)
        self.distribute_rgb = nn.Conv2d(width, width, kernel_size=1)
        self.distribute_thermal = nn.Conv2d(width, width, kernel_size=1)
        if gating == "sigmoid":
            self.aggregate_gate = nn.Conv2d(2 * width, width, kernel_size=1)
            self.distribute_rgb_gate = nn.Conv2d(width, width, kernel_size=1)
            self.distribute_thermal_gate = nn.Conv2d(width, width, kernel_size=1)

    def _gated(self, conv, gate, x):
        out = conv(x)
        if self.gating == "sigmoid":
            out = out * torch.sigmoid(gate(x))
        return out

    def forward(self, rgb, thermal, shared):
        if rgb.shape != thermal.shape or rgb.shape != shared.shape:
            raise ValidationError(
                "exchange maps must share one shape, got "
                f"{tuple(rgb.shape)}/{tuple(thermal.shape)}/{tuple(shared.shape)}"
            )
        pair = torch.cat([rgb, thermal], dim=1)
        gate = getattr(self, "aggregate_gate", None)
        shared = shared + self._gated(self.aggregate, gate, pair)
        gate = getattr(self, "distribute_rgb_gate", None)
        rgb = rgb + self._gated(self.distribute_rgb, gate, shared)
        gate = getattr(self, "distribute_thermal_gate", None)
        thermal = thermal + self._gated(self.distribute_thermal, gate, shared)
        return rgb, thermal, shared


def cross_modal_exchange(module: CrossModalExchange, rgb, thermal, shared):
    """Functional alias for a single exchange step."""
    return module(rgb, thermal, shared)


class CountingModel(nn.Module):
    """Common interface: forward(rgb, thermal) -> (B, 1, ceil(H/s), ceil(W/s))."""

    def __init__(self, variant: ModelVariant):
        super().__init__()
        self.variant = variant
        self.head_config = variant.resolved_head()
        self.output_stride = self.head_config.output_stride

    def _crop(self, density: torch.Tensor, h: int, w: int) -> torch.Tensor:
        s = self.output_stride
        return density[:, :, : -(-h // s), : -(-w // s)]

    def _check_pair(self, rgb, thermal):
        if rgb is not None and thermal is not None:
            if rgb.shape[-2:] != thermal.shape[-2:]:
                raise ValidationError(
                    f"rgb and thermal sizes differ: {tuple(rgb.shape[-2:])}"
                    f" vs {tuple(thermal.shape[-2:])}"
                )

    @property
    def thermal_column_channels(self) -> int:
        return 3 if self.variant.six_channel_early else self.variant.thermal_channels

    def predict(self, sample: CrowdSample) -> DensityMap:
        rgb, thermal = sample_to_tensors(sample)
        device = next(self.parameters()).device
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                density = self.forward(rgb.to(device), thermal.to(device))
        finally:
            self.train(was_training)
        return DensityMap(grid=density[0, 0].cpu().numpy(), stride=self.output_stride)


class SingleColumnModel(CountingModel):
    """mono_rgb, mono_thermal and early fusion: one backbone, one head."""

    def __init__(self, variant: ModelVariant):
        super().__init__(variant)
        self.backbone = Backbone(variant.backbone.with_in_channels(self._in_channels(variant)))
        self.head = RegressionHead(self.head_config)

    @staticmethod
    def _in_channels(variant: ModelVariant) -> int:
        if variant.kind == "mono_rgb":
            return 3
        if variant.kind == "mono_thermal":
            return variant.thermal_channels
        return 3 + (3 if variant.six_channel_early else variant.thermal_channels)

    def _input(self, rgb, thermal):
        kind = self.variant.kind
        if kind == "mono_rgb":
            if rgb is None:
                raise ValidationError("mono_rgb model needs an rgb input")
            return rgb
        if kind == "mono_thermal":
            if thermal is None:
                raise ValidationError("mono_thermal model needs a thermal input")
            return _expand_thermal(thermal, self.variant.thermal_channels)
        if rgb is None or thermal is None:
            raise ValidationError("early fusion needs both modalities")
        return torch.cat([rgb, _expand_thermal(thermal, self.thermal_column_channels)], dim=1)

    def forward(self, rgb=None, thermal=None):
        self._check_pair(rgb, thermal)
        x = self._input(rgb, thermal)
        h, w = x.shape[-2:]
        density = self.head(aggregate(encode(self.backbone, x)))
        return self._crop(density, h, w)


class LateFusionModel(CountingModel):
    """Two independent columns, merged by a single 1x1 projection.

    Each column is the full monomodal computation up to (and including) the
    dilated branches; the projection sees the rgb features in its first
    input-channel block and the thermal features in the second.
    """

    def __init__(self, variant: ModelVariant):
        super().__init__(variant)
        self.rgb_backbone = Backbone(variant.backbone.with_in_channels(3))
        self.thermal_backbone = Backbone(
            variant.backbone.with_in_channels(variant.thermal_channels)
        )
        self.rgb_branches = DilatedBranches(self.head_config)
        self.thermal_branches = DilatedBranches(self.head_config)
        self.project = nn.Conv2d(2 * self.head_config.concat_width, 1, kernel_size=1)
        init_density_projection(self.project)

    def forward(self, rgb=None, thermal=None):
        if rgb is None or thermal is None:
            raise ValidationError("late fusion needs both modalities")
        self._check_pair(rgb, thermal)
        thermal = _expand_thermal(thermal, self.variant.thermal_channels)
        h, w = rgb.shape[-2:]
        rgb_feats = self.rgb_branches(aggregate(encode(self.rgb_backbone, rgb)))
        t_feats = self.thermal_branches(aggregate(encode(self.thermal_backbone, thermal)))
        density = F.relu(self.project(torch.cat([rgb_feats, t_feats], dim=1)))
        return self._crop(density, h, w)


class DeepFusionModel(CountingModel):
    """Three columns with per-stage exchange; the head reads the shared column."""

    def __init__(self, variant: ModelVariant):
        super().__init__(variant)
        self.rgb_backbone = Backbone(variant.backbone.with_in_channels(3))
        self.thermal_backbone = Backbone(
            variant.backbone.with_in_channels(variant.thermal_channels)
        )
        self.shared_backbone = Backbone(
            variant.backbone.with_in_channels(3 + variant.thermal_channels)
        )
        self.exchanges = nn.ModuleList(
            CrossModalExchange(spec.width, variant.exchange.gating) for spec in variant.backbone.stages
        )
        self.head = RegressionHead(self.head_config)

    def forward_features(self, rgb: torch.Tensor, thermal: torch.Tensor) -> dict:
        """Stage-by-stage pyramids for all three columns (inputs pre-padded)."""
        x_r, x_t = rgb, thermal
        x_s = torch.cat([rgb, thermal], dim=1)
        pyramids = {"rgb": [], "thermal": [], "shared": []}
        stages = zip(
            self.rgb_backbone.stages,
            self.thermal_backbone.stages,
            self.shared_backbone.stages,
            self.exchanges,
        )
        for stage_r, stage_t, stage_s, exchange in stages:
            x_r, x_t, x_s = stage_r(x_r), stage_t(x_t), stage_s(x_s)
            x_r, x_t, x_s = exchange(x_r, x_t, x_s)
            pyramids["rgb"].append(x_r)
            pyramids["thermal"].append(x_t)
            pyramids["shared"].append(x_s)
        return pyramids

    def forward(self, rgb=None, thermal=None):
        if rgb is None or thermal is None:
            raise ValidationError("deep fusion needs both modalities")
        self._check_pair(rgb, thermal)
        thermal = _expand_thermal(thermal, self.variant.thermal_channels)
        h, w = rgb.shape[-2:]
        cfg = self.rgb_backbone.config
        if h < cfg.min_input_size or w < cfg.min_input_size:
            raise ValidationError(
                f"input {h}x{w} smaller than minimum {cfg.min_input_size} for this config"
            )
        feats = self.forward_features(
            pad_to_stride(rgb, cfg.total_stride), pad_to_stride(thermal, cfg.total_stride)
        )
        density = self.head(aggregate(FeaturePyramid(tuple(feats["shared"]))))
        return self._crop(density, h, w)


def build_model(variant: ModelVariant, seed: int = 0) -> CountingModel:
    """Construct the requested variant with deterministic initialization."""
    torch.manual_seed(seed)
    if variant.kind in ("mono_rgb", "mono_thermal", "early"):
        return SingleColumnModel(variant)
    if variant.kind == "late":
        return LateFusionModel(variant)
    if variant.kind == "deep":
        return DeepFusionModel(variant)
    raise ConfigError(f"unknown variant kind {variant.kind!r}")


def count_parameters(model: nn.Module) -> int:
    """Exact number of learnable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def variant_to_dict(variant: ModelVariant) -> dict:
    return asdict(variant)


def variant_from_dict(d: dict) -> ModelVariant:
    backbone = BackboneConfig(
        in_channels=d["backbone"]["in_channels"],
        stages=tuple(StageSpec(**s) for s in d["backbone"]["stages"]),
    )
    head = None
    if d.get("head") is not None:
        h = dict(d["head"])
        h["dilation_rates"] = tuple(h["dilation_rates"])
        head = HeadConfig(**h)
    return ModelVariant(
        kind=d["kind"],
        backbone=backbone,
        head=head,
        exchange=ExchangeConfig(**d.get("exchange", {})),
        six_channel_early=d.get("six_channel_early", False),
        thermal_channels=d.get("thermal_channels", 1),
    )


CHECKPOINT_FORMAT = 1


def save_checkpoint(model: CountingModel, path, extra: dict | None = None) -> None:
    """Persist weights plus the variant needed to rebuild the model."""
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "variant": variant_to_dict(model.variant),
            "state_dict": model.state_dict(),
            "extra": dict(extra or {}),
        },
        path,
    )


def load_checkpoint(path) -> tuple[CountingModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or "variant" not in payload:
        raise ConfigError(f"not a crowdfuse checkpoint: {path}")
    variant = variant_from_dict(payload["variant"])
    model = build_model(variant)
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
