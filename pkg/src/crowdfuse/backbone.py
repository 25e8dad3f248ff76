"""Hierarchical transformer encoder producing a multi-scale feature pyramid.

Stages follow the spatial-reduction attention design: overlapping strided
patch embedding, attention whose keys/values are downsampled by a per-stage
reduction ratio, and a depthwise-conv MLP. Stage k runs at cumulative stride
4 * 2**(k-1), so a 4-stage encoder emits maps at strides 4/8/16/32.

Inputs whose sides are not multiples of the total stride are reflect-padded
on the bottom/right by ``pad_to_stride``; callers crop derived outputs back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class StageSpec:
    width: int
    depth: int
    heads: int
    sr_ratio: int
    mlp_ratio: float = 4.0
    patch_size: int = 3
    stride: int = 2


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    stages: tuple[StageSpec, ...] = ()

    def __post_init__(self):
        if len(self.stages) < 2:
            raise ConfigError("backbone needs at least 2 stages")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        prev_width = 0
        for k, s in enumerate(self.stages):
            expected_stride = 4 if k == 0 else 2
            if s.stride != expected_stride:
                raise ConfigError(
                    f"stage {k} stride must be {expected_stride}, got {s.stride}"
                )
            if s.width < prev_width:
                raise ConfigError("embedding widths must be non-decreasing across stages")
            if s.width % s.heads != 0:
                raise ConfigError(f"stage {k} width {s.width} not divisible by heads {s.heads}")
            prev_width = s.width

    @property
    def total_stride(self) -> int:
        return 4 * 2 ** (len(self.stages) - 1)

    @property
    def cumulative_strides(self) -> tuple[int, ...]:
        return tuple(4 * 2**k for k in range(len(self.stages)))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(s.width for s in self.stages)

    @property
    def min_input_size(self) -> int:
        # the k/v reduction conv needs a stage map at least sr_ratio wide
        return max(
            cs * max(s.sr_ratio, 1)
            for cs, s in zip(self.cumulative_strides, self.stages)
        )

    def with_in_channels(self, n: int) -> "BackboneConfig":
        return replace(self, in_channels=n)


def tiny_config(in_channels: int = 3) -> BackboneConfig:
    """2-stage desk-scale preset (widths 16/32, depths 2/2, heads 1/2, SR 4/2)."""
    return BackboneConfig(
        in_channels=in_channels,
        stages=(
            StageSpec(width=16, depth=2, heads=1, sr_ratio=4, mlp_ratio=2.0, patch_size=7, stride=4),
            StageSpec(width=32, depth=2, heads=2, sr_ratio=2, mlp_ratio=2.0, patch_size=3, stride=2),
        ),
    )


def tiny4_config(in_channels: int = 3) -> BackboneConfig:
    """4-stage preset small enough for CPU shape/property tests."""
    return BackboneConfig(
        in_channels=in_channels,
        stages=(
            StageSpec(width=8, depth=1, heads=1, sr_ratio=8, mlp_ratio=2.0, patch_size=7, stride=4),
            StageSpec(width=16, depth=1, heads=2, sr_ratio=4, mlp_ratio=2.0, patch_size=3, stride=2),
            StageSpec(width=32, depth=1, heads=4, sr_ratio=2, mlp_ratio=2.0, patch_size=3, stride=2),
            StageSpec(width=64, depth=1, heads=8, sr_ratio=1, mlp_ratio=2.0, patch_size=3, stride=2),
        ),
    )


def b0_config(in_channels: int = 3) -> BackboneConfig:
    """The B0-sized encoder: widths 32/64/160/256, depths 2/2/2/2."""
    return BackboneConfig(
        in_channels=in_channels,
        stages=(
            StageSpec(width=32, depth=2, heads=1, sr_ratio=8, mlp_ratio=8.0, patch_size=7, stride=4),
            StageSpec(width=64, depth=2, heads=2, sr_ratio=4, mlp_ratio=8.0, patch_size=3, stride=2),
            StageSpec(width=160, depth=2, heads=5, sr_ratio=2, mlp_ratio=4.0, patch_size=3, stride=2),
            StageSpec(width=256, depth=2, heads=8, sr_ratio=1, mlp_ratio=4.0, patch_size=3, stride=2),
        ),
    )


PRESET_CONFIGS = {"tiny": tiny_config, "tiny4": tiny4_config, "b0": b0_config}


@dataclass
class FeaturePyramid:
    """Per-stage feature maps, finest first, each (B, width_k, H/stride_k, W/stride_k)."""

    maps: tuple[torch.Tensor, ...]

    def __len__(self):
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, k):
        return self.maps[k]


def pad_to_stride(x: torch.Tensor, stride: int) -> torch.Tensor:
    """Reflect-pad bottom/right so H and W become multiples of stride."""
    h, w = x.shape[-2], x.shape[-1]
    ph = (stride - h % stride) % stride
    pw = (stride - w % stride) % stride
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph), mode="reflect")


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_channels, width, patch_size, stride):
        super().__init__()
        self.proj = nn.Conv2d(
            in_channels, width, kernel_size=patch_size, stride=stride, padding=patch_size // 2
        )
        self.norm = nn.LayerNorm(width, eps=1e-6)

    def forward(self, x):
        x = self.proj(x)
        _, _, h, w = x.shape
        x = x.flatten(2).transpose(1, 2)
        x = self.norm(x)
        return x, h, w


class SpatialReductionAttention(nn.Module):
    def __init__(self, dim, heads, sr_ratio):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim, bias=True)
        self.kv = nn.Linear(dim, dim * 2, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim, eps=1e-6)

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        if self.sr_ratio > 1:
            x_ = x.transpose(1, 2).reshape(b, c, h, w)
            x_ = self.sr(x_).reshape(b, c, -1).transpose(1, 2)
            x_ = self.norm(x_)
        else:
            x_ = x
        kv = self.kv(x_).reshape(b, -1, 2, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class ConvMlp(nn.Module):
    """MLP with a depthwise 3x3 conv between the two projections."""

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        b, n, c = x.shape
        x = x.transpose(1, 2).view(b, c, h, w)
        x = self.dwconv(x)
        x = x.flatten(2).transpose(1, 2)
        x = self.act(x)
        return self.fc2(x)


class Block(nn.Module):
    def __init__(self, dim, heads, sr_ratio, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = SpatialReductionAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = ConvMlp(dim, int(dim * mlp_ratio))

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        x = x + self.mlp(self.norm2(x), h, w)
        return x


class Stage(nn.Module):
    """Patch embedding plus a stack of attention blocks; NCHW in, NCHW out."""

    def __init__(self, in_channels, spec: StageSpec):
        super().__init__()
        self.patch_embed = OverlapPatchEmbed(in_channels, spec.width, spec.patch_size, spec.stride)
        self.blocks = nn.ModuleList(
            Block(spec.width, spec.heads, spec.sr_ratio, spec.mlp_ratio)
            for _ in range(spec.depth)
        )
        self.norm = nn.LayerNorm(spec.width, eps=1e-6)

    def forward(self, x):
        x, h, w = self.patch_embed(x)
        for blk in self.blocks:
            x = blk(x, h, w)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(x.shape[0], -1, h, w)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.zeros_(m.bias)
        nn.init.ones_(m.weight)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        m.weight.data.normal_(0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Stacked stages; forward expects H, W divisible by the total stride
    (use ``encode`` or ``pad_to_stride`` otherwise)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        channels = [config.in_channels] + [s.width for s in config.stages[:-1]]
        self.stages = nn.ModuleList(
            Stage(c, spec) for c, spec in zip(channels, config.stages)
        )
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return FeaturePyramid(tuple(maps))


def build_backbone(config: BackboneConfig, seed: int = 0) -> Backbone:
    """Construct a backbone with deterministic random initialization."""
    torch.manual_seed(seed)
    return Backbone(config)


def encode(backbone: Backbone, images: torch.Tensor) -> FeaturePyramid:
    """Run a (B, C, H, W) batch through the backbone, padding as needed.

    The pyramid is that of the padded input; stage k has spatial size
    H_pad / stride_k. Raises ValidationError on channel mismatch or inputs
    smaller than the configuration's minimum size.
    """
    cfg = backbone.config
    if images.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise ValidationError(
            f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(images.shape)}"
        )
    h, w = images.shape[-2], images.shape[-1]
    if h < cfg.min_input_size or w < cfg.min_input_size:
        raise ValidationError(
            f"input {h}x{w} smaller than minimum {cfg.min_input_size} for this config"
        )
    return backbone(pad_to_stride(images, cfg.total_stride))


def load_weights(backbone: Backbone, path) -> tuple[list[str], list[str]]:
    """Load a torch checkpoint into the backbone (non-strict).

    Accepts either a bare state dict or a dict with a "state_dict" key;
    returns (missing, unexpected) key lists for caller inspection.
    """
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    result = backbone.load_state_dict(state, strict=False)
    return list(result.missing_keys), list(result.unexpected_keys)
