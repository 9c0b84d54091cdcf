from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msproto.backbone import (
    DEEPLAB_RATES,
    BackboneConfig,
    MultiScaleBackbone,
    downscale_image,
    downscale_labels,
    extract_features,
    labels_at_feature_grid,
    upsample_map,
)
from msproto.errors import ConfigError


def make_backbone(seed=0, **kw):
    torch.manual_seed(seed)
    return MultiScaleBackbone(BackboneConfig(**kw))


def test_feature_shape_64():
    fm = extract_features(np.zeros((64, 64, 3)), make_backbone())
    assert fm.data.shape == (8, 8, 4, 16)
    assert fm.source_shape == (64, 64)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 70), st.integers(1, 70))
def test_shape_contract_random_sizes(h, w):
    bb = make_backbone()
    fm = extract_features(np.random.default_rng(0).random((h, w, 3)), bb)
    assert fm.data.shape[:2] == bb.cfg.feature_shape(h, w) == (-(-h // 8), -(-w // 8))
    assert np.isfinite(fm.data).all()


def test_zero_branch_weights_zero_image():
    bb = make_backbone()
    with torch.no_grad():
        for br in bb.aspp.branches:
            br.weight.zero_()
            br.bias.zero_()
    fm = extract_features(np.zeros((32, 32, 3)), bb)
    assert not fm.data.any()


def test_zeroing_one_branch_zeroes_only_its_slab():
    bb = make_backbone()
    with torch.no_grad():
        bb.aspp.branches[2].weight.zero_()
        bb.aspp.branches[2].bias.zero_()
    fm = extract_features(np.random.default_rng(1).random((32, 32, 3)), bb)
    assert not fm.data[:, :, 2].any()
    for s in (0, 1, 3):
        assert np.abs(fm.data[:, :, s]).sum() > 0


def test_deterministic_output():
    img = np.random.default_rng(2).random((32, 32, 3))
    a = extract_features(img, make_backbone(seed=7)).data
    b = extract_features(img, make_backbone(seed=7)).data
    assert a.tobytes() == b.tobytes()


def test_feature_map_tensor_round_trip():
    fm = extract_features(np.random.default_rng(3).random((24, 16, 3)), make_backbone())
    t = fm.to_tensor()
    assert t.shape == (1, 4, 16, 3, 2)
    assert np.array_equal(t[0].numpy().transpose(2, 3, 0, 1), fm.data)


def test_channel_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        extract_features(np.zeros((16, 16, 4)), make_backbone())
    with pytest.raises(ConfigError):
        make_backbone()(torch.zeros(1, 1, 16, 16))


def test_non_finite_image_rejected():
    img = np.zeros((16, 16, 3))
    img[3, 3, 0] = np.nan
    with pytest.raises(ValueError):
        extract_features(img, make_backbone())


@pytest.mark.parametrize("kw", [
    dict(atrous_rates=(1, 3, 2, 4)),
    dict(atrous_rates=(1, 2, 3)),
    dict(num_scales=0, atrous_rates=()),
    dict(reduction=4),
    dict(encoder_id="resnet"),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        BackboneConfig(**kw)


def test_external_encoder_needs_trunk():
    with pytest.raises(ConfigError):
        MultiScaleBackbone(BackboneConfig(encoder_id="external"))


def test_external_trunk_plugs_in():
    class Trunk(torch.nn.Module):
        out_channels = 5

        def forward(self, x):
            return torch.nn.functional.avg_pool2d(x[:, :1].repeat(1, 5, 1, 1), 4, ceil_mode=True)

    cfg = BackboneConfig(encoder_id="external", reduction=4, feature_dim=6)
    out = MultiScaleBackbone(cfg, Trunk())(torch.zeros(2, 3, 16, 16))
    assert out.shape == (2, 4, 6, 4, 4)


def test_atrous_ratios():
    assert BackboneConfig().atrous_ratios == (1, 2, 3, 4)
    cfg = BackboneConfig(atrous_rates=DEEPLAB_RATES)
    assert cfg.atrous_ratios == (Fraction(1), Fraction(2), Fraction(3), Fraction(4))
    odd = BackboneConfig(atrous_rates=(2, 3, 5, 8))
    assert odd.atrous_ratios[0] == 1 and odd.atrous_ratios[1] == Fraction(3, 2)


# -- resampling ---------------------------------------------------------------------

def test_downscale_identity_and_size():
    img = np.random.default_rng(4).random((64, 64, 3))
    assert np.array_equal(downscale_image(img, 1), img)
    assert downscale_image(img, 2).shape == (32, 32, 3)
    assert downscale_image(img, 3).shape == (21, 21, 3)
    assert downscale_image(np.zeros((2, 2, 3)), 8).shape == (1, 1, 3)
    with pytest.raises(ValueError):
        downscale_image(img, 0.5)


@pytest.mark.parametrize("ratio", [1, Fraction(3, 2), 2, 3, 4, 7.3])
def test_constant_image_stays_constant(ratio):
    img = np.full((50, 37, 3), 0.3137)
    small = downscale_image(img, ratio)
    assert (small == 0.3137).all()
    back = upsample_map(small.transpose(2, 0, 1), (50, 37))
    assert (back == 0.3137).all()


def test_downscale_average_of_pairs():
    img = np.arange(16, dtype=float).reshape(4, 4)[..., None]
    out = downscale_image(img, 2)[..., 0]
    # half-pixel sampling at ratio 2 averages 2x2 blocks
    expected = np.array([[2.5, 4.5], [10.5, 12.5]])
    assert np.allclose(out, expected)


def test_upsample_single_value():
    assert (upsample_map(np.full((1, 1), 2.5), (7, 5)) == 2.5).all()


def test_upsample_closed_form():
    out = upsample_map(np.array([[0.0, 1.0], [0.0, 1.0]]), (2, 4))
    assert np.allclose(out, [[0, 1 / 3, 2 / 3, 1]] * 2)


def test_upsample_identity_and_corners():
    m = np.random.default_rng(5).random((3, 5))
    assert np.array_equal(upsample_map(m, (3, 5)), m)
    big = upsample_map(m, (9, 13))
    assert big[0, 0] == m[0, 0] and big[-1, -1] == m[-1, -1]
    assert big[0, -1] == m[0, -1] and big[-1, 0] == m[-1, 0]


def test_upsample_stride_mode_hits_samples():
    m = np.random.default_rng(6).random((4, 4))
    big = upsample_map(m, (32, 32), mode="stride", stride=8)
    assert np.array_equal(big[::8, ::8], m)
    assert (big[24:, 24:] == m[3, 3]).all()


def test_upsample_torch_differentiable():
    m = torch.rand(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    upsample_map(m, (7, 7)).sum().backward()
    assert m.grad is not None and torch.isfinite(m.grad).all()


def test_label_resampling():
    lab = np.arange(64, dtype=np.uint8).reshape(8, 8)
    assert np.array_equal(downscale_labels(lab, (4, 4)), lab[::2, ::2])
    assert np.array_equal(labels_at_feature_grid(lab, 4), lab[::4, ::4])
