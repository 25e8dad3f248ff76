"""Point-supervised Bayesian counting loss, computed in density-grid space.

Each grid cell is assigned a posterior over the annotated points,
proportional to exp(-||cell - point||^2 / (2 sigma^2)) and normalized per
cell. The expected count attributed to point n is the posterior-weighted sum
of the density, and the loss is sum_n |1 - E[c_n]|. Sigma is expressed in
density-grid pixels (an image-space sigma divides by the output stride).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError, ValidationError

BACKGROUND_NONE = "none"
BACKGROUND_TOTAL_COUNT = "total_count"


@dataclass(frozen=True)
class LossConfig:
    sigma: float = 2.0  # grid pixels; 8 image pixels / output stride 4
    background_handling: str = BACKGROUND_TOTAL_COUNT

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.background_handling not in (BACKGROUND_NONE, BACKGROUND_TOTAL_COUNT):
            raise ConfigError(f"unknown background_handling {self.background_handling!r}")

    @classmethod
    def from_image_sigma(cls, sigma_px: float, output_stride: int, **kw) -> "LossConfig":
        return cls(sigma=sigma_px / output_stride, **kw)


def _as_points(points, dtype, device) -> torch.Tensor:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    pts = torch.as_tensor(arr, dtype=dtype, device=device)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError(f"points must be (N, 2) of (x, y), got {tuple(pts.shape)}")
    return pts


def posterior_weights(points, grid_shape, sigma: float) -> torch.Tensor:
    """Per-point weight maps of shape (N, H, W); weights over points sum to 1
    at every cell. Cells sit at integer (row, col) coordinates and points are
    (x, y) in the same grid space.
    """
    if sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    pts = _as_points(points, torch.float64, "cpu")
    if pts.shape[0] == 0:
        raise ValidationError("posterior_weights needs at least one point")
    h, w = grid_shape
    rows = torch.arange(h, dtype=pts.dtype)
    cols = torch.arange(w, dtype=pts.dtype)
    gy, gx = torch.meshgrid(rows, cols, indexing="ij")
    d2 = (gx[None] - pts[:, 0, None, None]) ** 2 + (gy[None] - pts[:, 1, None, None]) ** 2
    logits = -d2 / (2.0 * sigma * sigma)
    logits = logits - logits.max(dim=0, keepdim=True).values  # per-cell stabilization
    weights = torch.exp(logits)
    return weights / weights.sum(dim=0, keepdim=True)


def bayesian_loss(density, points, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Loss for one density grid against its annotation points.

    density: (H, W) tensor (graph-connected for training) or any 2-D array.
    With zero points the behavior follows config.background_handling:
    total-count fallback returns |sum(density)|, "none" raises.
    """
    dens = torch.as_tensor(density)
    if dens.ndim != 2:
        raise ValidationError(f"density must be 2-D, got shape {tuple(dens.shape)}")
    if not torch.isfinite(dens).all():
        raise NumericError("density contains NaN or Inf")
    pts = _as_points(points, dens.dtype, dens.device)
    if pts.shape[0] == 0:
        if config.background_handling == BACKGROUND_TOTAL_COUNT:
            return dens.sum().abs()
        raise ValidationError("no annotation points and background_handling='none'")
    h, w = dens.shape
    if ((pts[:, 0] < 0) | (pts[:, 0] >= w) | (pts[:, 1] < 0) | (pts[:, 1] >= h)).any():
        raise ValidationError("annotation point outside the density grid")
    weights = posterior_weights(pts.detach().cpu(), (h, w), config.sigma)
    weights = weights.to(dtype=dens.dtype, device=dens.device)
    expected = (weights * dens[None]).sum(dim=(1, 2))
    return (1.0 - expected).abs().sum()
