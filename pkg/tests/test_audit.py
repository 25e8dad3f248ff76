import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from crowdfuse.audit import (
    AuditConfig,
    BrightnessRecord,
    PortableRng,
    brightness,
    brightness_count_table,
    correlation_report,
    criteria_report,
    pearson,
    render_overlay,
    render_scatter,
    run_audit,
    sample_subset,
    write_brightness_csv,
)
from crowdfuse.data import CrowdSample, PointAnnotation, load_manifest
from crowdfuse.errors import ValidationError
from crowdfuse.synth import SynthSpec, generate_dataset, generate_sample, grid_specs, skewed_specs


def brute_force_pearson(xs, ys):
    """Independent oracle: direct covariance sums in plain python."""
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    vx = sum((x - mx) ** 2 for x in xs)
    vy = sum((y - my) ** 2 for y in ys)
    return cov / math.sqrt(vx * vy)


def test_brightness_black_white_exact():
    black = np.zeros((5, 7, 3), dtype=np.uint8)
    white = np.full((4, 4, 3), 255, dtype=np.uint8)
    assert abs(brightness(black) - 0.0) < 1e-9
    assert abs(brightness(white) - 255.0) < 1e-9


def test_brightness_two_pixel_hand_value():
    img = np.array([[[10, 20, 30], [40, 50, 60]]], dtype=np.uint8)  # 1x2x3
    assert abs(brightness(img) - 35.0) < 1e-9  # 210 / 6


def test_brightness_rejects_non_three_channel():
    with pytest.raises(ValidationError):
        brightness(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValidationError):
        brightness(np.zeros((4, 4, 4), dtype=np.uint8))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_brightness_bounded_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(6, 5, 3), dtype=np.uint8)
    b = brightness(img)
    assert 0.0 <= b <= 255.0
    flat = img.reshape(-1, 3)
    shuffled = flat[rng.permutation(len(flat))].reshape(img.shape)
    assert abs(brightness(shuffled) - b) < 1e-9


def test_pearson_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    xs = rng.uniform(0, 255, size=1000).tolist()
    ys = (255 - np.asarray(xs) + rng.normal(0, 30, size=1000)).tolist()
    assert abs(pearson(xs, ys) - brute_force_pearson(xs, ys)) < 1e-9


def test_correlation_perfect_anticorrelation():
    records = [BrightnessRecord(str(i), float(b), int(255 - b)) for i, b in enumerate(range(0, 250, 10))]
    report = correlation_report(records)
    assert abs(report.pearson_r - (-1.0)) < 1e-9
    assert report.imbalance_flag is True


def test_correlation_unknown_when_degenerate():
    records = [BrightnessRecord(str(i), 100.0, i) for i in range(5)]
    report = correlation_report(records)
    assert report.pearson_r is None
    assert report.imbalance_flag is None
    assert correlation_report(records[:1]).pearson_r is None
    # spread below quantization noise is degenerate too, not a real signal
    noisy = [BrightnessRecord(str(i), 100.0 + 0.002 * i, 10 - i) for i in range(5)]
    assert correlation_report(noisy).pearson_r is None


def test_correlation_independent_grid_not_flagged():
    rng = np.random.default_rng(1)
    records = []
    for i in range(200):
        records.append(BrightnessRecord(str(i), float(rng.uniform(20, 240)), int(rng.integers(0, 12))))
    report = correlation_report(records)
    assert abs(report.pearson_r) < 0.2
    assert report.imbalance_flag is False


def test_decile_rule_flags_dark_high_count_cluster():
    # count mostly independent of brightness, but the top-count decile is dark
    rng = np.random.default_rng(2)
    records = []
    for i in range(45):
        records.append(BrightnessRecord(str(i), float(rng.uniform(0, 255)), int(i % 9)))
    for i in range(5):
        records.append(BrightnessRecord(f"d{i}", 15.0, 9))
    report = correlation_report(records)
    assert report.pearson_r > -0.3  # correlation alone would not trip
    assert report.imbalance_flag is True


def test_portable_rng_known_sequence():
    rng = PortableRng(0)
    first = rng.next_u32()
    assert first == 1013904223
    assert rng.next_u32() == (1664525 * first + 1013904223) % 2**32


def test_sample_subset_sizes_and_determinism():
    items = list(range(100))
    subset = sample_subset(items, 0.1, seed=1)
    assert len(subset) == 10
    assert subset == sample_subset(items, 0.1, seed=1)
    assert len(set(subset)) == 10
    assert sample_subset(items, 0.1, seed=2) != subset
    assert len(sample_subset(list(range(5)), 0.1, seed=0)) == 1  # minimum 1
    assert sample_subset([], 0.5, seed=0) == []


def test_sample_subset_full_fraction_is_permutation():
    items = list(range(20))
    permuted = sample_subset(items, 1.0, seed=3)
    assert sorted(permuted) == items
    assert permuted != items  # seed 3 shuffles this range


def test_sample_subset_rejects_bad_fraction():
    for fraction in (0.0, -0.1, 1.5):
        with pytest.raises(ValidationError):
            sample_subset([1, 2, 3], fraction, seed=0)


def test_render_overlay_geometry_and_marker_pixels(tmp_path, flat_sample):
    out = render_overlay(flat_sample, tmp_path / "overlay.png")
    img = np.asarray(Image.open(out))
    w = flat_sample.width
    assert img.shape == (flat_sample.height, 2 * w + 4, 3)
    # 3px marker outline centered on (10, 10) in both panels
    for ox in (0, w + 4):
        assert tuple(img[10, ox + 9]) == (255, 255, 0)
        assert tuple(img[9, ox + 10]) == (255, 255, 0)
        assert tuple(img[10, ox + 10]) != (255, 255, 0)  # hollow center


def test_render_overlay_no_points_is_clean(tmp_path):
    sample = CrowdSample(
        rgb=np.full((32, 32, 3), 50, dtype=np.uint8),
        thermal=np.full((32, 32), 60, dtype=np.uint8),
        points=[],
    )
    out = render_overlay(sample, tmp_path / "o.png")
    img = np.asarray(Image.open(out))
    yellow = (img[..., 0] == 255) & (img[..., 1] == 255) & (img[..., 2] == 0)
    assert not yellow.any()


def test_brightness_count_table_records_failures(tmp_path):
    manifest = generate_dataset(
        [SynthSpec(width=64, height=64, count=c, seed=c) for c in range(10)], tmp_path
    )
    (tmp_path / manifest.entries[4].rgb).write_bytes(b"not a png")
    records, failures = brightness_count_table(manifest)
    assert len(records) == 9
    assert len(failures) == 1


def test_brightness_count_table_matches_generator_truth(tmp_path):
    specs = [SynthSpec(width=64, height=64, count=c, brightness_target=40.0 + 20 * c, seed=c)
             for c in range(10)]
    manifest = generate_dataset(specs, tmp_path)
    records, failures = brightness_count_table(manifest)
    assert failures == []
    for record, spec in zip(records, specs):
        assert record.count == spec.count
        assert abs(record.brightness - spec.brightness_target) <= 2.0


def test_brightness_count_table_empty_dataset():
    records, failures = brightness_count_table([])
    assert records == [] and failures == []


def test_criteria_time_coverage_fails_when_clustered():
    samples = []
    for i in range(8):  # everything captured in one late-night window
        s = generate_sample(SynthSpec(width=64, height=64, count=i, seed=i, time_of_day=23.0))
        samples.append(s)
    results = {c.name: c.verdict for c in criteria_report(samples)}
    assert results["time_of_day_coverage"] == "fail"


def test_criteria_time_unknown_without_metadata():
    samples = [generate_sample(SynthSpec(width=64, height=64, count=3, seed=i)) for i in range(4)]
    results = {c.name: c.verdict for c in criteria_report(samples)}
    assert results["time_of_day_coverage"] == "unknown"
    assert results["count_independent_of_time"] == "unknown"
    assert results["annotations_cover_both_modalities"] == "manual_review"
    assert results["modalities_captured_simultaneously"] == "manual_review"


def test_criteria_pass_on_balanced_grid():
    samples = [generate_sample(s) for s in grid_specs()]
    results = {c.name: c.verdict for c in criteria_report(samples)}
    assert results["brightness_count_balance"] == "pass"
    assert results["time_of_day_coverage"] == "pass"
    assert results["count_independent_of_time"] == "pass"


def test_criteria_fail_on_skewed_preset():
    samples = [generate_sample(s) for s in skewed_specs()]
    results = {c.name: c.verdict for c in criteria_report(samples)}
    assert results["brightness_count_balance"] == "fail"


def test_run_audit_end_to_end(tmp_path):
    manifest = generate_dataset(skewed_specs(n=20), tmp_path / "data")
    report = run_audit(manifest, tmp_path / "out", AuditConfig(fraction=0.1, seed=1))
    assert report.pearson_r < -0.8
    assert report.imbalance_flag is True
    assert len(report.overlay_paths) == 2
    payload = json.loads((tmp_path / "out" / "report.json").read_text())
    assert payload["imbalance_flag"] is True
    assert (tmp_path / "out" / "brightness.csv").exists()
    assert (tmp_path / "out" / "scatter.png").exists()
    text = (tmp_path / "out" / "report.txt").read_text()
    assert "imbalance flag: True" in text


def test_scatter_and_csv_deterministic(tmp_path):
    records = [BrightnessRecord(str(i), 10.0 * i, i) for i in range(12)]
    for name in ("a", "b"):
        write_brightness_csv(records, tmp_path / f"{name}.csv")
        render_scatter(records, tmp_path / f"{name}.png")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
