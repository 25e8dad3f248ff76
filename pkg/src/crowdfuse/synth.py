"""Deterministic synthetic RGB-thermal scene generator.

Crowd count and optical brightness are independently controllable so that
balanced and deliberately skewed datasets can be produced for training and
audit tests. Persons are Gaussian-intensity blobs: bright against a dark
background in thermal, contrast-colored but brightness-neutral in RGB.
Per-person visibility flags can hide a person in either modality while
keeping its annotation, reproducing the one-modality-only pathology seen in
real paired datasets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    CrowdSample,
    DatasetManifest,
    PointAnnotation,
    save_sample,
    write_manifest,
)
from .errors import CapacityError, ValidationError

BLOB_SIGMA = 1.7
BLOB_RADIUS = 5
MARGIN = BLOB_RADIUS + 1
MIN_SEPARATION = 4.0
THERMAL_BACKGROUND = 25.0
THERMAL_AMPLITUDE = 190.0
RGB_CONTRAST = 70.0


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic sample; identical specs give identical bytes."""

    width: int
    height: int
    count: int
    brightness_target: float = 127.0
    modality_visibility: tuple[float, float] = (1.0, 1.0)  # (rgb, thermal)
    seed: int = 0
    time_of_day: float | None = None  # optional hour tag, carried into meta

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValidationError(f"frame must be at least 16x16, got {self.width}x{self.height}")
        if self.count < 0:
            raise ValidationError(f"count must be non-negative, got {self.count}")
        if not (0.0 <= self.brightness_target <= 255.0):
            raise ValidationError(f"brightness_target outside [0, 255]: {self.brightness_target}")
        for v in self.modality_visibility:
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"visibility must be in [0, 1], got {v}")
        if self.time_of_day is not None and not (0.0 <= self.time_of_day < 24.0):
            raise ValidationError(f"time_of_day must be in [0, 24), got {self.time_of_day}")


def _place_persons(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[float, float]]:
    lo_x, hi_x = MARGIN, spec.width - 1 - MARGIN
    lo_y, hi_y = MARGIN, spec.height - 1 - MARGIN
    usable = max(hi_x - lo_x, 0) * max(hi_y - lo_y, 0)
    capacity = int(usable / (MIN_SEPARATION**2))
    if spec.count > capacity:
        raise CapacityError(
            f"cannot place {spec.count} persons in a {spec.width}x{spec.height} frame"
            f" (capacity ~{capacity})"
        )
    placed: list[tuple[float, float]] = []
    attempts = 0
    max_attempts = 1000 + 500 * spec.count
    while len(placed) < spec.count:
        attempts += 1
        if attempts > max_attempts:
            raise CapacityError(
                f"placement failed after {max_attempts} attempts for count {spec.count}"
            )
        x = rng.uniform(lo_x, hi_x)
        y = rng.uniform(lo_y, hi_y)
        if all((x - px) ** 2 + (y - py) ** 2 >= MIN_SEPARATION**2 for px, py in placed):
            placed.append((x, y))
    return placed


def _blob(canvas: np.ndarray, x: float, y: float, amplitude: float) -> None:
    """Add a Gaussian bump in place; canvas is 2-D float."""
    h, w = canvas.shape
    x0, x1 = int(np.floor(x)) - BLOB_RADIUS, int(np.ceil(x)) + BLOB_RADIUS + 1
    y0, y1 = int(np.floor(y)) - BLOB_RADIUS, int(np.ceil(y)) + BLOB_RADIUS + 1
    x0, x1 = max(x0, 0), min(x1, w)
    y0, y1 = max(y0, 0), min(y1, h)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d2 = (xs - x) ** 2 + (ys - y) ** 2
    canvas[y0:y1, x0:x1] += amplitude * np.exp(-d2 / (2.0 * BLOB_SIGMA**2))


def generate_sample(spec: SynthSpec) -> CrowdSample:
    """Render a paired sample with exactly spec.count annotated persons.

    The optical mean brightness lands within a fraction of a gray level of
    brightness_target for mid-range targets (person colors are chosen
    brightness-neutral and the residual is corrected by a global shift).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    positions = _place_persons(spec, rng)
    vis_rgb = rng.random(spec.count) < spec.modality_visibility[0]
    vis_thermal = rng.random(spec.count) < spec.modality_visibility[1]
    # per-person brightness-neutral color direction, e.g. (+2, -1, -1)
    color_axis = rng.integers(0, 3, size=spec.count)

    thermal = np.full((spec.height, spec.width), THERMAL_BACKGROUND, dtype=np.float64)
    for i, (x, y) in enumerate(positions):
        if vis_thermal[i]:
            _blob(thermal, x, y, THERMAL_AMPLITUDE)

    rgb = np.full((spec.height, spec.width, 3), spec.brightness_target, dtype=np.float64)
    for i, (x, y) in enumerate(positions):
        if not vis_rgb[i]:
            continue
        weights = np.full(3, -1.0)
        weights[color_axis[i]] = 2.0
        for ch in range(3):
            _blob(rgb[:, :, ch], x, y, RGB_CONTRAST * weights[ch])

    # pull the realized mean onto the target; converges unless clipping binds
    for _ in range(24):
        delta = spec.brightness_target - rgb.mean()
        if abs(delta) < 0.005:
            break
        rgb = np.clip(rgb + delta, 0.0, 255.0)

    sample = CrowdSample(
        rgb=np.clip(np.round(rgb), 0, 255).astype(np.uint8),
        thermal=np.clip(np.round(thermal), 0, 255).astype(np.uint8),
        points=[PointAnnotation(x, y) for x, y in positions],
        meta={"source": "synth", "seed": spec.seed},
    )
    if spec.time_of_day is not None:
        sample.meta["time_of_day"] = spec.time_of_day
    sample.validate()
    return sample


def generate_dataset(specs, out_dir) -> DatasetManifest:
    """Write images, annotations and a manifest for every spec, in order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, spec in enumerate(specs):
        sample = generate_sample(spec)
        entries.append(save_sample(sample, out_dir, f"{i:05d}"))
    manifest = DatasetManifest(root=out_dir, entries=entries)
    write_manifest(manifest, out_dir / "manifest.txt")
    return manifest


def _child_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index * 7919 + 17) % (1 << 31)


def grid_specs(
    counts=(2, 4, 6, 8, 10),
    brightness_targets=(40.0, 90.0, 140.0, 190.0, 240.0),
    size: int = 64,
    seed: int = 0,
) -> list[SynthSpec]:
    """Balanced preset: the full count x brightness grid.

    Count is independent of brightness (and of the capture-time tag, which
    tracks brightness only) by construction.
    """
    specs = []
    n_b = len(brightness_targets)
    for ci, count in enumerate(counts):
        for bi, target in enumerate(brightness_targets):
            specs.append(
                SynthSpec(
                    width=size,
                    height=size,
                    count=count,
                    brightness_target=float(target),
                    seed=_child_seed(seed, ci * n_b + bi),
                    time_of_day=24.0 * (bi + 0.5) / n_b,
                )
            )
    return specs


def skewed_specs(n: int = 25, size: int = 64, seed: int = 0) -> list[SynthSpec]:
    """Imbalanced preset: high counts only at low brightness (near-linear
    negative relationship), mimicking a thermal-biased collection."""
    specs = []
    for i in range(n):
        b = 25.0 + (230.0 - 25.0) * i / max(n - 1, 1)
        count = int(round(30.0 - 28.0 * (b - 25.0) / 205.0))
        specs.append(
            SynthSpec(
                width=size,
                height=size,
                count=count,
                brightness_target=b,
                seed=_child_seed(seed, i),
            )
        )
    return specs


def train_specs(
    counts=tuple(range(1, 9)), size: int = 64, brightness_target: float = 127.0, seed: int = 0
) -> list[SynthSpec]:
    """Small fixed-size set for overfit/training tests, one spec per count."""
    return [
        SynthSpec(
            width=size,
            height=size,
            count=c,
            brightness_target=brightness_target,
            seed=_child_seed(seed, i),
        )
        for i, c in enumerate(counts)
    ]


PRESETS = {
    "grid": grid_specs,
    "skewed": skewed_specs,
    "train": train_specs,
}
