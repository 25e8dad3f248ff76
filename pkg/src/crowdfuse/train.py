"""Augmentation and the point-supervised training loop.

The recipe follows the standard counting setup: random square crops with
both modalities sharing the crop window and flip decision, horizontal flips
with probability 0.5, decoupled-weight-decay Adam, and the Bayesian point
loss with sigma given in image pixels. Images smaller than the crop size are
used at their full size (the crop is clamped) so desk-scale datasets remain
trainable with the default 256-pixel crop.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .data import CrowdSample, PointAnnotation
from .errors import NumericError, ValidationError
from .loss import LossConfig, bayesian_loss
from .models import CountingModel, sample_to_tensors, save_checkpoint


@dataclass(frozen=True)
class Hyperparams:
    crop: int = 256
    flip_prob: float = 0.5
    lr: float = 1e-5
    weight_decay: float = 1e-4
    batch: int = 8
    epochs: int = 60
    sigma: float = 8.0  # image pixels; divided by the model's output stride
    seed: int = 0

    def __post_init__(self):
        if self.crop <= 0 or self.batch <= 0 or self.epochs < 0:
            raise ValidationError("crop and batch must be positive, epochs non-negative")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValidationError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.lr < 0 or self.weight_decay < 0 or self.sigma <= 0:
            raise ValidationError("lr/weight_decay must be >= 0 and sigma > 0")

    def override(self, **kw) -> "Hyperparams":
        return replace(self, **kw)


def augment(sample: CrowdSample, hp: Hyperparams, rng: np.random.Generator) -> CrowdSample:
    """Random crop plus optional horizontal flip, applied identically to both
    modalities. Points are moved into crop coordinates; points outside the
    window are dropped; a flip maps x to W_crop - 1 - x."""
    h, w = sample.rgb.shape[:2]
    ch, cw = min(hp.crop, h), min(hp.crop, w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < hp.flip_prob)

    rgb = sample.rgb[top : top + ch, left : left + cw]
    thermal = sample.thermal[top : top + ch, left : left + cw]
    points = []
    for p in sample.points:
        x, y = p.x - left, p.y - top
        if 0 <= x < cw and 0 <= y < ch:
            points.append(PointAnnotation(x, y))
    if flip:
        rgb = rgb[:, ::-1]
        thermal = thermal[:, ::-1]
        points = [PointAnnotation(cw - 1 - p.x, p.y) for p in points]
    return CrowdSample(
        rgb=np.ascontiguousarray(rgb),
        thermal=np.ascontiguousarray(thermal),
        points=points,
        meta=dict(sample.meta),
    )


@dataclass
class TrainResult:
    history: list[float]  # per-epoch mean loss
    steps: int


def _grid_points(points, stride: int) -> np.ndarray:
    if not points:
        return np.zeros((0, 2), dtype=np.float64)
    return np.array([[p.x / stride, p.y / stride] for p in points], dtype=np.float64)


def train(
    model: CountingModel,
    samples: list[CrowdSample],
    hp: Hyperparams,
    out_dir=None,
    keep_checkpoints: bool = False,
) -> TrainResult:
    """Optimize the model in place; returns the loss history.

    Deterministic for a given seed on CPU. Raises NumericError with a
    diagnostics dict as soon as a non-finite loss appears. When out_dir is
    given a rolling checkpoint is written after every epoch (per-epoch files
    with keep_checkpoints=True).
    """
    if not samples:
        raise ValidationError("train needs a non-empty dataset")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(hp.seed)
    rng = np.random.default_rng(hp.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    loss_cfg = LossConfig.from_image_sigma(hp.sigma, model.output_stride)
    device = next(model.parameters()).device

    history: list[float] = []
    steps = 0
    for epoch in range(hp.epochs):
        model.train()
        order = rng.permutation(len(samples))
        batch_losses: list[float] = []
        for start in range(0, len(order), hp.batch):
            batch = order[start : start + hp.batch]
            optimizer.zero_grad()
            losses = []
            try:
                for idx in batch:
                    crop = augment(samples[idx], hp, rng)
                    rgb, thermal = sample_to_tensors(crop)
                    density = model(rgb.to(device), thermal.to(device))[0, 0]
                    pts = _grid_points(crop.points, model.output_stride)
                    losses.append(bayesian_loss(density, pts, loss_cfg))
                batch_loss = torch.stack(losses).mean()
                value = float(batch_loss.detach())
                if not np.isfinite(value):
                    raise NumericError("non-finite training loss")
            except NumericError as exc:
                raise NumericError(
                    str(exc),
                    diagnostics={
                        "epoch": epoch,
                        "step": steps,
                        "recent_epoch_losses": history[-3:],
                        **exc.diagnostics,
                    },
                ) from None
            batch_loss.backward()
            optimizer.step()
            steps += 1
            batch_losses.append(value)
        history.append(float(np.mean(batch_losses)))
        if out_dir is not None:
            save_checkpoint(model, out_dir / "checkpoint_last.pt", {"epoch": epoch})
            if keep_checkpoints:
                save_checkpoint(model, out_dir / f"checkpoint_{epoch:04d}.pt", {"epoch": epoch})
    return TrainResult(history=history, steps=steps)
