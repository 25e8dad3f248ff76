import hashlib

import pytest
import torch
import torch.nn as nn

from crowdfuse.backbone import pad_to_stride
from crowdfuse.errors import ConfigError, ValidationError
from crowdfuse.head import DensityMap
from crowdfuse.models import (
    CrossModalExchange,
    ModelVariant,
    VARIANT_KINDS,
    b0_variant,
    build_model,
    count_parameters,
    load_checkpoint,
    sample_to_tensors,
    save_checkpoint,
    tiny_variant,
    variant_from_dict,
    variant_to_dict,
)


def state_checksum(module):
    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


def zero_exchange(model):
    with torch.no_grad():
        for exchange in model.exchanges:
            for p in exchange.parameters():
                p.zero_()


def test_all_variants_share_predict_interface(small_sample):
    for kind in VARIANT_KINDS:
        model = build_model(tiny_variant(kind), seed=0)
        density = model.predict(small_sample)
        assert isinstance(density, DensityMap)
        assert density.grid.shape == (16, 16)
        assert density.stride == 4
        assert (density.grid >= 0).all()


def test_unknown_variant_kind_rejected():
    with pytest.raises(ConfigError):
        ModelVariant(kind="mid", backbone=tiny_variant("early").backbone)


def test_early_six_channel_mode(small_sample):
    model = build_model(tiny_variant("early", six_channel_early=True), seed=0)
    assert model.backbone.config.in_channels == 6
    density = model.predict(small_sample)
    assert density.grid.shape == (16, 16)
    four = build_model(tiny_variant("early"), seed=0)
    assert four.backbone.config.in_channels == 4


def test_three_channel_thermal_variants_accept_single_plane(small_sample):
    for kind in ("mono_thermal", "late", "deep"):
        model = build_model(tiny_variant(kind, thermal_channels=3), seed=0)
        assert model.predict(small_sample).grid.shape == (16, 16)


def test_single_conv_parameter_count_by_hand():
    conv = nn.Conv2d(3, 8, kernel_size=3, bias=True)
    assert count_parameters(conv) == 3 * 3 * 3 * 8 + 8  # 224


def test_parameter_count_deterministic():
    a = count_parameters(build_model(tiny_variant("mono_rgb"), seed=0))
    b = count_parameters(build_model(tiny_variant("mono_rgb"), seed=9))
    assert a == b  # count depends on config only


def test_early_minus_mono_is_first_projection_delta():
    mono = count_parameters(build_model(b0_variant("mono_rgb")))
    early = count_parameters(build_model(b0_variant("early")))
    early6 = count_parameters(build_model(b0_variant("early", six_channel_early=True)))
    w1, k = 32, 7
    assert early - mono == 1 * k * k * w1  # 4-channel stack adds one input plane
    assert early6 - mono == 3 * k * k * w1


def test_parameter_ordering_tiny():
    params = {
        kind: count_parameters(build_model(tiny_variant(kind))) for kind in VARIANT_KINDS
    }
    assert params["deep"] > params["late"] > params["early"]
    assert params["early"] > params["mono_rgb"]
    assert 1.9 <= params["late"] / params["mono_rgb"] <= 2.1


def test_exchange_preserves_shapes_and_validates():
    torch.manual_seed(0)
    exchange = CrossModalExchange(width=16)
    r, t, s = (torch.randn(2, 16, 8, 8) for _ in range(3))
    r2, t2, s2 = exchange(r, t, s)
    assert r2.shape == r.shape and t2.shape == t.shape and s2.shape == s.shape
    with pytest.raises(ValidationError):
        exchange(r, t, torch.randn(2, 16, 4, 4))


def test_exchange_zero_weights_zero_inputs_leave_shared_unchanged():
    for gating in ("sigmoid", "identity"):
        exchange = CrossModalExchange(width=8, gating=gating)
        with torch.no_grad():
            for p in exchange.parameters():
                p.zero_()
        r = torch.zeros(1, 8, 4, 4)
        t = torch.zeros(1, 8, 4, 4)
        s = torch.randn(1, 8, 4, 4)
        _, _, s2 = exchange(r, t, s)
        assert torch.equal(s2, s)


def test_gradient_flows_into_both_specific_stems(small_sample):
    model = build_model(tiny_variant("deep"), seed=0)
    rgb, thermal = sample_to_tensors(small_sample)
    loss = model(rgb, thermal).sum()
    loss.backward()
    rgb_stem = model.rgb_backbone.stages[0].patch_embed.proj.weight.grad
    t_stem = model.thermal_backbone.stages[0].patch_embed.proj.weight.grad
    assert rgb_stem is not None and float(rgb_stem.abs().sum()) > 0
    assert t_stem is not None and float(t_stem.abs().sum()) > 0


def test_deep_with_zeroed_exchange_reduces_to_monomodal_columns(small_sample):
    model = build_model(tiny_variant("deep"), seed=0).eval()
    zero_exchange(model)
    rgb, thermal = sample_to_tensors(small_sample)
    stride = model.rgb_backbone.config.total_stride
    with torch.no_grad():
        feats = model.forward_features(
            pad_to_stride(rgb, stride), pad_to_stride(thermal, stride)
        )
        rgb_alone = model.rgb_backbone(pad_to_stride(rgb, stride))
        t_alone = model.thermal_backbone(pad_to_stride(thermal, stride))
        shared_alone = model.shared_backbone(
            torch.cat([pad_to_stride(rgb, stride), pad_to_stride(thermal, stride)], dim=1)
        )
    for k in range(len(rgb_alone)):
        assert torch.allclose(feats["rgb"][k], rgb_alone[k], atol=1e-5)
        assert torch.allclose(feats["thermal"][k], t_alone[k], atol=1e-5)
        assert torch.allclose(feats["shared"][k], shared_alone[k], atol=1e-5)


def test_late_fusion_weight_slicing_equivalence(small_sample):
    late = build_model(tiny_variant("late"), seed=0).eval()
    mono = build_model(tiny_variant("mono_rgb"), seed=1).eval()
    cw = late.head_config.concat_width
    mono.backbone.load_state_dict(late.rgb_backbone.state_dict())
    mono.head.branches.load_state_dict(late.rgb_branches.state_dict())
    with torch.no_grad():
        mono.head.project.weight.copy_(late.project.weight[:, :cw])
        mono.head.project.bias.copy_(late.project.bias)
        late.project.weight[:, cw:].zero_()  # thermal contribution removed
    rgb, thermal = sample_to_tensors(small_sample)
    with torch.no_grad():
        assert torch.allclose(late(rgb, thermal), mono(rgb), atol=1e-5)


def test_forward_input_requirements(small_sample):
    rgb, thermal = sample_to_tensors(small_sample)
    with pytest.raises(ValidationError):
        build_model(tiny_variant("mono_rgb"))(thermal=thermal)
    with pytest.raises(ValidationError):
        build_model(tiny_variant("late"))(rgb=rgb)
    with pytest.raises(ValidationError):
        build_model(tiny_variant("deep"))(rgb, thermal[:, :, :32, :32])


def test_models_reject_too_small_inputs():
    rgb = torch.rand(1, 3, 8, 8)
    thermal = torch.rand(1, 1, 8, 8)
    for kind in VARIANT_KINDS:
        model = build_model(tiny_variant(kind), seed=0)
        with pytest.raises(ValidationError):
            model(rgb, thermal)


def test_density_cropped_to_ceil_of_input(small_sample):
    model = build_model(tiny_variant("mono_rgb"), seed=0).eval()
    with torch.no_grad():
        out = model(torch.rand(1, 3, 70, 65))
    assert out.shape == (1, 1, 18, 17)  # ceil(70/4), ceil(65/4)


def test_checkpoint_round_trip(tmp_path, small_sample):
    model = build_model(tiny_variant("late"), seed=0)
    save_checkpoint(model, tmp_path / "m.pt", extra={"epoch": 3})
    loaded, extra = load_checkpoint(tmp_path / "m.pt")
    assert extra == {"epoch": 3}
    assert loaded.variant.kind == "late"
    assert state_checksum(loaded) == state_checksum(model)
    a = model.predict(small_sample).grid
    b = loaded.predict(small_sample).grid
    assert (a == b).all()


def test_checkpoint_rejects_foreign_payload(tmp_path):
    torch.save({"something": 1}, tmp_path / "junk.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "junk.pt")


def test_variant_dict_round_trip():
    for kind in VARIANT_KINDS:
        variant = tiny_variant(kind, six_channel_early=(kind == "early"))
        assert variant_from_dict(variant_to_dict(variant)) == variant


def test_head_config_mismatch_rejected():
    from crowdfuse.head import HeadConfig

    backbone = tiny_variant("mono_rgb").backbone
    with pytest.raises(ConfigError):
        build_model(ModelVariant(kind="mono_rgb", backbone=backbone, head=HeadConfig(fused_width=99)))
