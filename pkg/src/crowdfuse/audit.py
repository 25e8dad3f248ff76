"""Dataset bias analysis: brightness statistics, brightness/count correlation,
annotation overlays for manual review, and a dataset-criteria checklist.

The correlation thresholds quantify what is otherwise a visual judgement;
they are declared defaults, overridable via AuditConfig.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .data import CrowdSample, DatasetManifest, load_sample
from .errors import ValidationError

logger = logging.getLogger(__name__)

MARKER_COLOR = (255, 255, 0)
SEPARATOR_WIDTH = 4


def brightness(rgb: np.ndarray) -> float:
    """Mean of the R, G and B channel values over all pixels, in [0, 255]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"brightness needs an (H, W, 3) image, got {rgb.shape}")
    return float(rgb.astype(np.float64).sum() / (3.0 * rgb.shape[0] * rgb.shape[1]))


@dataclass(frozen=True)
class BrightnessRecord:
    sample_id: str
    brightness: float
    count: int


@dataclass(frozen=True)
class AuditConfig:
    """Thresholds and sampling knobs for the audit procedures."""

    r_threshold: float = -0.3
    top_count_quantile: float = 0.9
    low_brightness_quantile: float = 0.25
    min_brightness_spread: float = 0.5  # gray levels; below this r is meaningless
    fraction: float = 0.1
    seed: int = 0
    time_bins: int = 6
    time_entropy_min: float = 0.75
    time_r_max: float = 0.3


def _iter_loaded(dataset):
    """Yield (sample_id, sample-or-None, error-or-None) for manifests or sample lists."""
    if isinstance(dataset, DatasetManifest):
        for i, entry in enumerate(dataset.entries):
            try:
                sample = load_sample(entry, dataset.root)
            except Exception as exc:  # per-sample failures are recorded, not fatal
                yield f"{i:05d}", None, exc
                continue
            yield sample.meta.get("id", f"{i:05d}"), sample, None
    else:
        for i, sample in enumerate(dataset):
            yield sample.meta.get("id", f"{i:05d}"), sample, None


def brightness_count_table(dataset) -> tuple[list[BrightnessRecord], list[str]]:
    """One (id, brightness, count) record per loadable sample, in dataset order.

    Returns (records, failures); a failed load contributes a failure message
    instead of a record.
    """
    records: list[BrightnessRecord] = []
    failures: list[str] = []
    for sample_id, sample, exc in _iter_loaded(dataset):
        if exc is not None:
            msg = f"{sample_id}: {exc}"
            logger.warning("skipping unreadable sample %s", msg)
            failures.append(msg)
            continue
        records.append(
            BrightnessRecord(sample_id, brightness(sample.rgb), sample.count)
        )
    return records, failures


def write_brightness_csv(records: Sequence[BrightnessRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,brightness,count\n")
        for r in records:
            fh.write(f"{r.sample_id},{r.brightness:.6f},{r.count}\n")


def render_scatter(records: Sequence[BrightnessRecord], path, size=(640, 480)) -> None:
    """Brightness-vs-count scatter as a plain raster (x fixed to 0..255)."""
    w, h = size
    margin = 48
    img = Image.new("RGB", size, (255, 255, 255))
    draw = ImageDraw.Draw(img)
    x0, y0, x1, y1 = margin, h - margin, w - margin, margin
    draw.line([(x0, y0), (x1, y0)], fill=(0, 0, 0))
    draw.line([(x0, y0), (x0, y1)], fill=(0, 0, 0))
    max_count = max((r.count for r in records), default=1)
    y_top = max(1.0, max_count * 1.05)
    for tick in (0, 64, 128, 192, 255):
        tx = x0 + (x1 - x0) * tick / 255.0
        draw.line([(tx, y0), (tx, y0 + 4)], fill=(0, 0, 0))
        draw.text((tx - 8, y0 + 6), str(tick), fill=(0, 0, 0))
    draw.text((x1 - 60, y0 + 20), "brightness", fill=(0, 0, 0))
    draw.text((4, y1 - 16), f"count (max {max_count})", fill=(0, 0, 0))
    for r in records:
        px = x0 + (x1 - x0) * min(max(r.brightness, 0.0), 255.0) / 255.0
        py = y0 - (y0 - y1) * r.count / y_top
        draw.rectangle([px - 1, py - 1, px + 1, py + 1], fill=(40, 40, 160))
    img.save(path)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Plain Pearson correlation in float64; raises on degenerate variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValidationError("pearson needs at least 2 paired values")
    xd = x - x.mean()
    yd = y - y.mean()
    denom = math.sqrt(float((xd * xd).sum()) * float((yd * yd).sum()))
    if denom == 0.0:
        raise ValidationError("pearson undefined for zero variance")
    return float((xd * yd).sum() / denom)


@dataclass(frozen=True)
class CorrelationReport:
    pearson_r: float | None
    imbalance_flag: bool | None
    detail: str


def correlation_report(
    records: Sequence[BrightnessRecord], cfg: AuditConfig = AuditConfig()
) -> CorrelationReport:
    """Correlate brightness with count and flag a thermal-favoring imbalance.

    The flag trips when r < cfg.r_threshold or when the highest-count decile
    is concentrated below the dataset's low-brightness quartile. Degenerate
    inputs (fewer than 2 records, zero brightness variance) yield an
    "unknown" report with no flag.
    """
    if len(records) < 2:
        return CorrelationReport(None, None, "unknown: fewer than 2 records")
    b = np.array([r.brightness for r in records], dtype=np.float64)
    c = np.array([r.count for r in records], dtype=np.float64)
    if float(b.std()) < cfg.min_brightness_spread or float(c.var()) == 0.0:
        return CorrelationReport(
            None, None, "unknown: degenerate brightness or count variance"
        )
    r = pearson(b, c)
    flagged = r < cfg.r_threshold
    detail = f"pearson_r={r:.4f} (threshold {cfg.r_threshold})"
    count_cut = float(np.quantile(c, cfg.top_count_quantile))
    bright_cut = float(np.quantile(b, cfg.low_brightness_quantile))
    top = b[c >= count_cut]
    if top.size:
        top_mean = float(top.mean())
        if top_mean < bright_cut:
            flagged = True
            detail += (
                f"; top-decile counts have mean brightness {top_mean:.1f}"
                f" below the {cfg.low_brightness_quantile:.0%} quartile {bright_cut:.1f}"
            )
    return CorrelationReport(r, flagged, detail)


class PortableRng:
    """32-bit linear congruential generator for cross-platform sampling.

    x_{n+1} = (1664525 * x_n + 1013904223) mod 2**32. Bounded draws use
    rejection to avoid modulo bias.
    """

    _A = 1664525
    _C = 1013904223
    _M = 1 << 32

    def __init__(self, seed: int):
        self.state = seed % self._M

    def next_u32(self) -> int:
        self.state = (self._A * self.state + self._C) % self._M
        return self.state

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (self._M // n) * n
        while True:
            v = self.next_u32()
            if v < limit:
                return v % n


def sample_subset(items: Sequence, fraction: float, seed: int) -> list:
    """Uniform subset without replacement: floor(fraction*N) items, at least 1
    when N >= 1. Deterministic for a given seed on every platform."""
    if not (0.0 < fraction <= 1.0):
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    n = len(items)
    if n == 0:
        return []
    k = int(math.floor(fraction * n + 1e-9))
    k = max(1, min(k, n))
    rng = PortableRng(seed)
    order = list(range(n))
    for i in range(n - 1, 0, -1):  # Fisher-Yates
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    return [items[i] for i in order[:k]]


def render_overlay(sample: CrowdSample, out_path, separator: int = SEPARATOR_WIDTH) -> Path:
    """Write rgb|thermal side by side with a square marker per annotation.

    Markers are drawn at the same shared coordinates on both panels;
    marker size is max(3, W/64) pixels (forced odd so it centers exactly).
    """
    sample.validate()
    h, w = sample.rgb.shape[:2]
    marker = max(3, w // 64) | 1
    half = marker // 2
    canvas = Image.new("RGB", (2 * w + separator, h), (255, 255, 255))
    canvas.paste(Image.fromarray(sample.rgb, mode="RGB"), (0, 0))
    canvas.paste(Image.fromarray(sample.thermal, mode="L").convert("RGB"), (w + separator, 0))
    draw = ImageDraw.Draw(canvas)
    for p in sample.points:
        x, y = int(round(p.x)), int(round(p.y))
        for ox in (0, w + separator):
            draw.rectangle(
                [ox + x - half, y - half, ox + x + half, y + half],
                outline=MARKER_COLOR,
            )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return out_path


@dataclass(frozen=True)
class CriterionResult:
    name: str
    verdict: str  # pass | fail | unknown | manual_review
    detail: str


def _normalized_entropy(values: Sequence[float], bins: int) -> float:
    hist, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(0.0, 24.0))
    total = hist.sum()
    if total == 0:
        return 0.0
    p = hist[hist > 0] / total
    return float(-(p * np.log(p)).sum() / math.log(bins))


def criteria_report(
    samples: Sequence[CrowdSample],
    cfg: AuditConfig = AuditConfig(),
    records: Sequence[BrightnessRecord] | None = None,
    overlay_paths: Sequence[str] = (),
) -> list[CriterionResult]:
    """Judge the dataset against the balanced-collection criteria.

    Missing evidence yields "unknown"; labeling practice and capture
    simultaneity cannot be judged automatically and are marked for manual
    review with the rendered overlays attached.
    """
    results: list[CriterionResult] = []
    times = [s.meta.get("time_of_day") for s in samples]
    have_time = len(samples) > 0 and all(t is not None for t in times)

    if have_time:
        entropy = _normalized_entropy(times, cfg.time_bins)
        verdict = "pass" if entropy >= cfg.time_entropy_min else "fail"
        detail = f"normalized capture-time entropy {entropy:.3f} over {cfg.time_bins} bins"
    else:
        verdict, detail = "unknown", "no capture-time metadata"
    results.append(CriterionResult("time_of_day_coverage", verdict, detail))

    if have_time and len(samples) >= 2:
        counts = [float(s.count) for s in samples]
        try:
            r = pearson(times, counts)
            verdict = "pass" if abs(r) < cfg.time_r_max else "fail"
            detail = f"|pearson(count, time)| = {abs(r):.4f} (max {cfg.time_r_max})"
        except ValidationError:
            verdict, detail = "unknown", "degenerate count or time variance"
    else:
        verdict, detail = "unknown", "no capture-time metadata"
    results.append(CriterionResult("count_independent_of_time", verdict, detail))

    if records is None:
        records = [
            BrightnessRecord(s.meta.get("id", str(i)), brightness(s.rgb), s.count)
            for i, s in enumerate(samples)
        ]
    corr = correlation_report(records, cfg)
    if corr.imbalance_flag is None:
        verdict = "unknown"
    else:
        verdict = "fail" if corr.imbalance_flag else "pass"
    results.append(CriterionResult("brightness_count_balance", verdict, corr.detail))

    overlay_note = (
        f"{len(overlay_paths)} overlay(s) rendered for review"
        if overlay_paths
        else "render overlays to review"
    )
    results.append(
        CriterionResult(
            "annotations_cover_both_modalities",
            "manual_review",
            overlay_note,
        )
    )
    results.append(
        CriterionResult("modalities_captured_simultaneously", "manual_review", overlay_note)
    )
    return results


@dataclass
class AuditReport:
    records: list[BrightnessRecord]
    pearson_r: float | None
    imbalance_flag: bool | None
    criteria: list[CriterionResult]
    overlay_paths: list[str]
    failures: list[str] = field(default_factory=list)


def report_to_dict(report: AuditReport) -> dict:
    return {
        "n_records": len(report.records),
        "pearson_r": report.pearson_r,
        "imbalance_flag": report.imbalance_flag,
        "criteria": [
            {"name": c.name, "verdict": c.verdict, "detail": c.detail}
            for c in report.criteria
        ],
        "overlay_paths": list(report.overlay_paths),
        "failures": list(report.failures),
    }


def report_to_text(report: AuditReport) -> str:
    lines = [f"samples audited: {len(report.records)}"]
    if report.pearson_r is None:
        lines.append("brightness/count correlation: unknown")
    else:
        lines.append(
            f"brightness/count pearson r: {report.pearson_r:.4f}"
            f" (imbalance flag: {report.imbalance_flag})"
        )
    lines.append("criteria:")
    for c in report.criteria:
        lines.append(f"  [{c.verdict:>13}] {c.name}: {c.detail}")
    if report.failures:
        lines.append("load failures:")
        for f in report.failures:
            lines.append(f"  {f}")
    lines.append(f"overlays: {len(report.overlay_paths)}")
    return "\n".join(lines) + "\n"


def run_audit(dataset, out_dir, cfg: AuditConfig = AuditConfig()) -> AuditReport:
    """Full audit: brightness table + scatter, correlation, a deterministic
    sample of annotation overlays, and the criteria checklist.

    Writes brightness.csv, scatter.png, overlays/, report.json and report.txt
    under out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, failures = brightness_count_table(dataset)
    write_brightness_csv(records, out_dir / "brightness.csv")
    render_scatter(records, out_dir / "scatter.png")
    corr = correlation_report(records, cfg)

    loaded = [s for _, s, exc in _iter_loaded(dataset) if exc is None]
    subset = sample_subset(loaded, cfg.fraction, cfg.seed) if loaded else []
    overlay_paths: list[str] = []  # relative to out_dir, so reports relocate
    for sample in subset:
        sid = sample.meta.get("id", f"{len(overlay_paths):05d}")
        path = render_overlay(sample, out_dir / "overlays" / f"overlay_{sid}.png")
        overlay_paths.append(str(path.relative_to(out_dir)))

    criteria = criteria_report(loaded, cfg, records=records, overlay_paths=overlay_paths)
    report = AuditReport(
        records=records,
        pearson_r=corr.pearson_r,
        imbalance_flag=corr.imbalance_flag,
        criteria=criteria,
        overlay_paths=overlay_paths,
        failures=failures,
    )
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(report_to_text(report))
    return report
