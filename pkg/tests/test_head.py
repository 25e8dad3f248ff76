import numpy as np
import pytest
import torch

from crowdfuse.errors import ConfigError, ValidationError
from crowdfuse.head import (
    DensityMap,
    HeadConfig,
    RegressionHead,
    aggregate,
    density_from_tensor,
    predict_count,
)


def fake_pyramid(batch=1, widths=(16, 32, 64, 128), base=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    maps = []
    for k, w in enumerate(widths):
        size = base // 2**k
        maps.append(torch.rand(batch, w, size, size, generator=g))
    return maps


def test_aggregate_shapes_from_four_stages():
    fused = aggregate(fake_pyramid())
    assert fused.shape == (1, 16 + 32 + 64 + 128, 16, 16)


def test_aggregate_single_stage_is_identity():
    maps = fake_pyramid(widths=(24,))
    fused = aggregate(maps)
    assert torch.equal(fused, maps[0])


def test_aggregate_zero_pyramid_stays_zero():
    maps = [torch.zeros_like(m) for m in fake_pyramid()]
    assert torch.equal(aggregate(maps), torch.zeros(1, 240, 16, 16))


def test_aggregate_rejects_empty():
    with pytest.raises(ValidationError):
        aggregate([])


def test_aggregate_deterministic_and_batch_independent():
    maps = fake_pyramid(batch=2)
    fused = aggregate(maps)
    assert torch.equal(fused, aggregate(maps))
    solo = [aggregate([m[i : i + 1] for m in maps]) for i in range(2)]
    assert torch.allclose(fused, torch.cat(solo, dim=0), atol=1e-7)


def test_head_config_validation():
    with pytest.raises(ConfigError):
        HeadConfig(fused_width=48, dilation_rates=())
    with pytest.raises(ConfigError):
        HeadConfig(fused_width=48, dilation_rates=(1, 0))
    cfg = HeadConfig(fused_width=48)
    assert cfg.branch_width == 12
    assert cfg.concat_width == 36


def test_regression_output_nonnegative_for_arbitrary_weights():
    cfg = HeadConfig(fused_width=48)
    for seed in range(3):
        torch.manual_seed(seed)
        head = RegressionHead(cfg)
        with torch.no_grad():
            for p in head.parameters():  # arbitrary, including negative weights
                p.copy_(torch.randn_like(p))
            out = head(torch.randn(2, 48, 16, 16) * 5)
        assert float(out.min()) >= 0.0
        assert out.shape == (2, 1, 16, 16)


def test_zero_final_weights_with_bias_gives_constant_map():
    cfg = HeadConfig(fused_width=32)
    head = RegressionHead(cfg)
    with torch.no_grad():
        head.project.weight.zero_()
        head.project.bias.fill_(0.7)
        out = head(torch.randn(1, 32, 8, 8))
    assert torch.allclose(out, torch.full_like(out, 0.7))


def test_predict_count_values():
    assert predict_count(DensityMap(np.zeros((4, 4)), stride=4)) == 0.0
    grid = np.array([[0.5, 0.5], [1.0, 0.0]])
    assert predict_count(DensityMap(grid, stride=4)) == pytest.approx(2.0, abs=1e-12)


def test_predict_count_linear_in_grid():
    rng = np.random.default_rng(0)
    grid = rng.uniform(0, 1, size=(5, 7))
    base = predict_count(DensityMap(grid, stride=4))
    for alpha in (0.0, 0.5, 3.0):
        assert predict_count(DensityMap(alpha * grid, stride=4)) == pytest.approx(
            alpha * base, abs=1e-9
        )


def test_density_map_rejects_negative_cells():
    with pytest.raises(ValidationError):
        DensityMap(np.array([[0.1, -0.2]]), stride=4)


def test_density_from_tensor_squeezes_batch():
    d = density_from_tensor(torch.rand(1, 1, 6, 6), stride=4)
    assert d.grid.shape == (6, 6)
    assert d.count == pytest.approx(d.grid.sum())
    with pytest.raises(ValidationError):
        density_from_tensor(torch.rand(2, 1, 6, 6), stride=4)
