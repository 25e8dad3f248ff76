"""Pyramid aggregation and the dilated-convolution density regression head.

All pyramid maps are resized to the finest (stage-1) resolution and
concatenated; parallel 3x3 branches with different dilation rates then feed
a 1x1 projection whose output is clamped non-negative. The density map
therefore lives at output stride 4 and its cell sum is the predicted count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class HeadConfig:
    fused_width: int
    dilation_rates: tuple[int, ...] = (1, 2, 3)
    hidden_width: int | None = None  # per-branch channels; default fused_width // 4
    output_stride: int = 4

    def __post_init__(self):
        if not self.dilation_rates:
            raise ConfigError("dilation_rates must be non-empty")
        if any(d < 1 for d in self.dilation_rates):
            raise ConfigError(f"dilation rates must be >= 1, got {self.dilation_rates}")
        if self.fused_width < 1:
            raise ConfigError("fused_width must be positive")

    @property
    def branch_width(self) -> int:
        if self.hidden_width is not None:
            return self.hidden_width
        return max(self.fused_width // 4, 8)

    @property
    def concat_width(self) -> int:
        return self.branch_width * len(self.dilation_rates)


@dataclass
class DensityMap:
    """Non-negative density grid at ``stride`` relative to the input image."""

    grid: np.ndarray
    stride: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValidationError(f"density grid must be 2-D, got shape {self.grid.shape}")
        if (self.grid < 0).any():
            raise ValidationError("density grid has negative cells")

    @property
    def count(self) -> float:
        return float(self.grid.sum())


def predict_count(density: DensityMap) -> float:
    """Predicted count = sum over all density cells."""
    return float(np.asarray(density.grid, dtype=np.float64).sum())


def aggregate(pyramid) -> torch.Tensor:
    """Bilinearly resize every stage map to the stage-1 size and concatenate.

    Output width is the sum of stage widths; a single-stage pyramid passes
    through unchanged.
    """
    maps = list(pyramid)
    if not maps:
        raise ValidationError("cannot aggregate an empty pyramid")
    target = maps[0].shape[-2:]
    resized = [maps[0]]
    for m in maps[1:]:
        resized.append(F.interpolate(m, size=target, mode="bilinear", align_corners=False))
    if len(resized) == 1:
        return resized[0]
    return torch.cat(resized, dim=1)


class DilatedBranches(nn.Module):
    """Parallel 3x3 convolutions with the configured dilation rates,
    channelwise-concatenated."""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.branches = nn.ModuleList(
            nn.Conv2d(config.fused_width, config.branch_width, 3, padding=d, dilation=d)
            for d in config.dilation_rates
        )

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return torch.cat([F.relu(branch(fused)) for branch in self.branches], dim=1)


def init_density_projection(conv: nn.Conv2d) -> None:
    """Small weights and a slightly positive bias keep the initial density
    map alive (the ReLU clamp has no gradient once every cell is negative)."""
    nn.init.normal_(conv.weight, std=0.01)
    nn.init.constant_(conv.bias, 0.02)


class RegressionHead(nn.Module):
    """Dilated branches followed by a 1x1 projection and a ReLU clamp."""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.branches = DilatedBranches(config)
        self.project = nn.Conv2d(config.concat_width, 1, kernel_size=1)
        init_density_projection(self.project)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return F.relu(self.project(self.branches(fused)))


def density_from_tensor(density: torch.Tensor, stride: int) -> DensityMap:
    """Wrap a (h, w) or (1, 1, h, w) tensor as a DensityMap."""
    grid = density.detach().cpu().numpy()
    grid = np.squeeze(grid)
    if grid.ndim != 2:
        raise ValidationError(f"expected a single 2-D density grid, got shape {grid.shape}")
    return DensityMap(grid=grid, stride=stride)
