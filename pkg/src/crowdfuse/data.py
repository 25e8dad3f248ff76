"""Canonical dataset representation for paired RGB-thermal crowd samples.

A dataset on disk is a UTF-8 manifest file with one record per line:

    <rgb path> <thermal path> <annotation path>

Paths are relative to the manifest's directory. Annotation files hold one
head point per line as ``x y`` in pixel coordinates of the shared frame.
Images are PNG or JPEG; thermal files saved as gray RGB are collapsed to a
single channel by channel-mean on load.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError, ValidationError


@dataclass(frozen=True)
class PointAnnotation:
    """One annotated head position, in pixel coordinates (x = column, y = row)."""

    x: float
    y: float


@dataclass
class CrowdSample:
    """A paired RGB/thermal image with shared point annotations.

    rgb is (H, W, 3) uint8, thermal is (H, W) uint8; both modalities must
    share the same H and W. The ground-truth count is ``len(points)``.
    """

    rgb: np.ndarray
    thermal: np.ndarray
    points: list[PointAnnotation]
    meta: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def height(self) -> int:
        return int(self.rgb.shape[0])

    @property
    def width(self) -> int:
        return int(self.rgb.shape[1])

    def validate(self) -> None:
        """Raise ValidationError if any invariant is broken."""
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValidationError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if self.thermal.ndim != 2:
            raise ValidationError(
                f"thermal must be single-channel (H, W), got {self.thermal.shape}"
            )
        if self.rgb.shape[:2] != self.thermal.shape[:2]:
            raise ValidationError(
                "rgb and thermal sizes differ: "
                f"{self.rgb.shape[:2]} vs {self.thermal.shape[:2]}"
            )
        h, w = self.rgb.shape[:2]
        for i, p in enumerate(self.points):
            if not (0 <= p.x < w and 0 <= p.y < h):
                raise ValidationError(
                    f"point {i} ({p.x}, {p.y}) outside {w}x{h} image bounds"
                )


@dataclass(frozen=True)
class ManifestEntry:
    rgb: str
    thermal: str
    annotation: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest file into a DatasetManifest, preserving record order.

    Each non-blank line must name exactly three relative paths. With
    check_files (the default), every referenced file must exist.
    """
    path = Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 3:
                raise ManifestError(
                    f"expected 3 paths (rgb thermal annotation), got {len(fields)}",
                    path=path,
                    line=lineno,
                )
            entry = ManifestEntry(*fields)
            if check_files:
                for rel in fields:
                    target = root / rel
                    if not target.is_file():
                        raise FileNotFoundError(f"manifest references missing file: {target}")
            entries.append(entry)
    return DatasetManifest(root=root, entries=entries)


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Write entries back out, one whitespace-separated record per line."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(f"{e.rgb} {e.thermal} {e.annotation}\n")


def _load_thermal(path: Path) -> np.ndarray:
    img = np.asarray(Image.open(path))
    if img.ndim == 2:
        return img.astype(np.uint8)
    # gray-saved-as-RGB(A): collapse by channel mean
    return np.round(img[..., :3].astype(np.float64).mean(axis=2)).astype(np.uint8)


def load_points(path) -> list[PointAnnotation]:
    points = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 2:
                raise ManifestError(
                    f"expected 'x y', got {len(fields)} fields", path=path, line=lineno
                )
            try:
                x, y = float(fields[0]), float(fields[1])
            except ValueError:
                raise ManifestError(
                    f"non-numeric coordinates {fields!r}", path=path, line=lineno
                ) from None
            points.append(PointAnnotation(x, y))
    return points


def load_sample(entry: ManifestEntry, root) -> CrowdSample:
    """Decode one manifest entry into a validated CrowdSample."""
    root = Path(root)
    rgb = np.asarray(Image.open(root / entry.rgb).convert("RGB"))
    thermal = _load_thermal(root / entry.thermal)
    points = load_points(root / entry.annotation)
    sample = CrowdSample(rgb=rgb, thermal=thermal, points=points, meta={"id": _entry_id(entry)})
    sample.validate()
    return sample


def load_all(manifest: DatasetManifest) -> list[CrowdSample]:
    """Load every sample, in manifest order."""
    return [load_sample(e, manifest.root) for e in manifest.entries]


def save_sample(sample: CrowdSample, root, stem: str) -> ManifestEntry:
    """Write one sample's image pair and annotation file under root.

    Returns the manifest entry with paths relative to root.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rgb_name = f"{stem}_rgb.png"
    t_name = f"{stem}_t.png"
    ann_name = f"{stem}_points.txt"
    Image.fromarray(sample.rgb, mode="RGB").save(root / rgb_name)
    Image.fromarray(sample.thermal, mode="L").save(root / t_name)
    with open(root / ann_name, "w", encoding="utf-8") as fh:
        for p in sample.points:
            fh.write(f"{p.x!r} {p.y!r}\n")
    return ManifestEntry(rgb=rgb_name, thermal=t_name, annotation=ann_name)


def _entry_id(entry: ManifestEntry) -> str:
    name = Path(entry.rgb).name
    for suffix in ("_rgb.png", "_rgb.jpg", ".png", ".jpg"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def dataset_digest(manifest: DatasetManifest) -> str:
    """SHA-256 over all referenced file bytes, in manifest order."""
    h = hashlib.sha256()
    for e in manifest.entries:
        for rel in (e.rgb, e.thermal, e.annotation):
            h.update(rel.encode("utf-8"))
            h.update((manifest.root / rel).read_bytes())
    return h.hexdigest()
