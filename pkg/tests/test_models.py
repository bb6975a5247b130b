import numpy as np
import pytest
import torch
import torch.nn.functional as F

from lesionbench.core import Architecture
from lesionbench.models import (
    EncoderTaps,
    ModelSpec,
    PyramidPooling,
    ResNetEncoder,
    UnpoolIndexError,
    build,
    fcn_fuse,
    forward,
    max_unpool,
    parameter_checksum,
    parameter_count,
)
from lesionbench.models.blocks import Upsample, bilinear_kernel
from oracles import place_unpooled

TINY = dict(backbone_widths=(16, 32, 64, 128), backbone_blocks=(1, 1, 1, 1))


def tiny(arch, size=64, **kw):
    return ModelSpec(arch, (size, size), **{**TINY, **kw})


@pytest.mark.parametrize("arch", list(Architecture))
def test_output_shape_and_finite(arch):
    model = build(tiny(arch, 96)).eval()
    out = forward(model, np.random.default_rng(0).random((96, 96, 3)))
    assert out.shape == (96, 96, 6)
    assert np.isfinite(out).all()


@pytest.mark.parametrize("arch", list(Architecture))
def test_seeded_build_is_deterministic(arch):
    a, b = build(tiny(arch), seed=5), build(tiny(arch), seed=5)
    assert parameter_checksum(a) == parameter_checksum(b)
    x = torch.zeros(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(a.eval()(x), b.eval()(x))
    assert parameter_checksum(build(tiny(arch), seed=6)) != parameter_checksum(a)


def test_build_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build(tiny("UNet"))
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("arch", list(Architecture))
def test_every_parameter_receives_gradient(arch):
    model = build(tiny(arch), seed=1).train()
    x = torch.randn(2, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    y = torch.randint(0, 6, (2, 64, 64), generator=torch.Generator().manual_seed(1))
    F.cross_entropy(model(x), y).backward()
    # FCN-8's zero-initialised skip heads must still receive gradient.
    dead = [n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    assert dead == []


def test_wrong_input_size_rejected():
    model = build(tiny("UNet"))
    with pytest.raises(ValueError, match="built for"):
        model(torch.zeros(1, 3, 96, 96))
    with pytest.raises(ValueError):
        ModelSpec("UNet", (100, 100))


def test_encoder_taps_halve():
    for mode in ("conv", "pool"):
        enc = ResNetEncoder((16, 32, 64, 128), (1, 1, 1, 1), downsample=mode)
        taps = enc(torch.zeros(1, 3, 64, 64))
        assert [f.shape[-1] for f in taps.features] == [16, 8, 4, 2]
        assert [f.shape[1] for f in taps.features] == [16, 32, 64, 128]


def test_full_encoder_matches_resnet50_size():
    enc = ResNetEncoder()
    # Torchvision's ResNet-50 without its fc layer has 23,508,032 parameters.
    assert parameter_count(enc) == 23_508_032


def test_segnet_smaller_than_unet_full_width():
    seg = build(ModelSpec("SegNet", (64, 64)))
    unet = build(ModelSpec("UNet", (64, 64)))
    assert parameter_count(seg) < parameter_count(unet)


def test_ragnet_encoder_is_shared():
    model = build(tiny("RAGNet"))
    enc_ids = {id(p) for p in model.encoder.parameters()}
    seg_ids = {id(p) for n, p in model.named_parameters() if n.startswith("encoder.")}
    assert enc_ids == seg_ids and enc_ids


# ---------------------------------------------------------------------------
# Pyramid pooling
# ---------------------------------------------------------------------------


def test_pyramid_pool_constant_input():
    ppm = PyramidPooling(4, (1, 2, 3, 6), branch_channels=3)
    x = torch.full((1, 4, 6, 6), 2.5)
    for level in ppm.pooled(x):
        assert torch.allclose(level, torch.full_like(level, 2.5))
    assert ppm(x).shape[1] == 4 + 4 * 3 == ppm.out_channels


def test_pyramid_bin1_is_global_average():
    ppm = PyramidPooling(3, (1, 2, 3, 6), branch_channels=2)
    x = torch.randn(2, 3, 6, 6)
    assert torch.allclose(ppm.pooled(x)[0][..., 0, 0], x.mean(dim=(2, 3)))
    out = ppm(x)
    first = out[:, 3:5]
    assert torch.allclose(first, first[..., :1, :1].expand_as(first))


def test_pyramid_requires_four_bins():
    with pytest.raises(ValueError):
        PyramidPooling(4, (1, 2, 3))


# ---------------------------------------------------------------------------
# Max unpooling
# ---------------------------------------------------------------------------


def test_max_unpool_matches_placement_oracle():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        x = torch.randn(2, 3, 4, 4, generator=gen)
        values, idx = F.max_pool2d(x, 2, 2, return_indices=True)
        out = max_unpool(values, idx, (4, 4))
        assert out.tolist() == place_unpooled(values, idx, 4, 4)
        assert torch.equal(out, F.max_unpool2d(values, idx, 2, 2, output_size=(4, 4)))


def test_max_unpool_rejects_out_of_window_index():
    values, idx = F.max_pool2d(torch.randn(1, 1, 4, 4), 2, 2, return_indices=True)
    bad = idx.clone()
    bad[0, 0, 0, 0] = 15  # bottom-right pixel, outside the top-left window
    with pytest.raises(UnpoolIndexError):
        max_unpool(values, bad, (4, 4))


# ---------------------------------------------------------------------------
# FCN fusion and upsampling
# ---------------------------------------------------------------------------


def test_fcn_fuse_sizes_and_order_independence():
    s32, s16, s8 = torch.randn(1, 6, 2, 2), torch.randn(1, 6, 4, 4), torch.randn(1, 6, 8, 8)
    assert fcn_fuse(s32, (64, 64), "fcn32").shape[-2:] == (64, 64)
    a = fcn_fuse(s32, (64, 64), "fcn8", score16=s16, score8=s8)
    # Bilinear resizing is linear, so fusing in a different order gives the same map.
    up = F.interpolate(F.interpolate(s32, (4, 4), mode="bilinear", align_corners=False), (8, 8), mode="bilinear",
                       align_corners=False)
    up16 = F.interpolate(s16, (8, 8), mode="bilinear", align_corners=False)
    b = F.interpolate(s8 + up16 + up, (64, 64), mode="bilinear", align_corners=False)
    assert torch.allclose(a, b, atol=1e-5)


def test_transposed_upsample_starts_bilinear_inside():
    up = Upsample(2, 2, "transposed")
    x = torch.randn(1, 2, 6, 6)
    with torch.no_grad():
        y = up(x)
    ref = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    # Interior pixels agree; borders differ because the transposed conv zero-pads.
    assert torch.allclose(y[..., 2:-2, 2:-2], ref[..., 2:-2, 2:-2], atol=1e-6)
    assert bilinear_kernel(2).sum().item() == pytest.approx(4.0)


@pytest.mark.parametrize("arch", ["UNet", "FCN8"])
def test_transposed_mode_builds(arch):
    model = build(tiny(arch, upsample="transposed")).eval()
    with torch.no_grad():
        assert model(torch.zeros(1, 3, 64, 64)).shape == (1, 6, 64, 64)


def test_encoder_taps_dataclass_defaults():
    taps = EncoderTaps(features=(), channels=())
    assert taps.strides == (4, 8, 16, 32) and taps.indices is None
