"""The six segmentation networks on top of the shared residual encoder.

Every model maps N x 3 x H x W images to N x num_classes x H x W scores.
Decoder widths are derived from the encoder stage widths so that a slimmed
encoder slims the whole network.
"""

from __future__ import annotations

import torch
from torch import nn

from .backbone import EncoderTaps, ResNetEncoder, _init_weights
from .blocks import PyramidPooling, Upsample, conv_bn_relu, fcn_fuse, max_unpool


class SegmentationModel(nn.Module):
    """Base class. ``encoder`` is the shared feature extractor."""

    downsample = "conv"

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.encoder = ResNetEncoder(spec.backbone_widths, spec.backbone_blocks, downsample=self.downsample)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        if tuple(x.shape[-2:]) != tuple(self.spec.input_size):
            raise ValueError(f"input is {tuple(x.shape[-2:])}, model was built for {tuple(self.spec.input_size)}")
        return self.decode(self.encoder(x), x.shape[-2:])

    def decode(self, taps: EncoderTaps, size) -> torch.Tensor:
        raise NotImplementedError

    def encoder_parameter_count(self) -> int:
        return sum(p.numel() for p in self.encoder.parameters())

    def decoder_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters()) - self.encoder_parameter_count()


class FCN(SegmentationModel):
    """FCN-32 (single x32 upsample) or FCN-8 (two extra skip score heads)."""

    def __init__(self, spec, variant: str):
        super().__init__(spec)
        self.variant = variant
        c4, c8, c16, c32 = spec.backbone_widths
        k = spec.num_classes
        self.score32 = nn.Conv2d(c32, k, 1)
        if variant == "fcn8":
            self.score16 = nn.Conv2d(c16, k, 1)
            self.score8 = nn.Conv2d(c8, k, 1)
            self.ups = nn.ModuleList([Upsample(k, 2, spec.upsample), Upsample(k, 2, spec.upsample), Upsample(k, 8, spec.upsample)])
            # Skip heads start at zero so training begins from the coarse solution.
            for head in (self.score16, self.score8):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)
        else:
            self.ups = nn.ModuleList([Upsample(k, 32, spec.upsample)])

    def decode(self, taps, size):
        f = taps.features
        s32 = self.score32(f[3])
        if self.variant == "fcn32":
            return fcn_fuse(s32, size, "fcn32", ups=list(self.ups))
        return fcn_fuse(s32, size, "fcn8", score16=self.score16(f[2]), score8=self.score8(f[1]), ups=list(self.ups))


class UNet(SegmentationModel):
    """Upsample, concatenate the matching encoder tap, two 3x3 convs."""

    def __init__(self, spec):
        super().__init__(spec)
        c4, c8, c16, c32 = spec.backbone_widths
        d16, d8, d4, d2 = c16 // 2, c8 // 2, c4 // 2, c4 // 4
        mode = spec.upsample
        self.ups = nn.ModuleList([Upsample(c32, 2, mode), Upsample(d16, 2, mode), Upsample(d8, 2, mode),
                                  Upsample(d4, 2, mode), Upsample(d2, 2, mode)])
        self.block16 = nn.Sequential(conv_bn_relu(c32 + c16, d16), conv_bn_relu(d16, d16))
        self.block8 = nn.Sequential(conv_bn_relu(d16 + c8, d8), conv_bn_relu(d8, d8))
        self.block4 = nn.Sequential(conv_bn_relu(d8 + c4, d4), conv_bn_relu(d4, d4))
        self.block2 = conv_bn_relu(d4, d2)
        self.block1 = conv_bn_relu(d2, d2)
        self.classifier = nn.Conv2d(d2, spec.num_classes, 1)
        _init_weights(self._decoder_modules())

    def _decoder_modules(self):
        return nn.ModuleList([self.block16, self.block8, self.block4, self.block2, self.block1, self.classifier])

    def decode(self, taps, size):
        f4, f8, f16, f32 = taps.features
        x = self.block16(torch.cat([self.ups[0](f32, f16.shape[-2:]), f16], 1))
        x = self.block8(torch.cat([self.ups[1](x, f8.shape[-2:]), f8], 1))
        x = self.block4(torch.cat([self.ups[2](x, f4.shape[-2:]), f4], 1))
        x = self.block2(self.ups[3](x))
        x = self.block1(self.ups[4](x, size))
        return self.classifier(x)


class SegNet(SegmentationModel):
    """Decoder mirrors the encoder's max-pools: unpool with the recorded
    indices, then a 3x3 conv to densify the sparse map."""

    downsample = "pool"

    def __init__(self, spec):
        super().__init__(spec)
        c4, c8, c16, c32 = spec.backbone_widths
        stem = self.encoder.stem_width
        # Pooled maps feeding stages 1..4 had channels stem, c4, c8, c16.
        self.project = conv_bn_relu(c32, c16, kernel=1)
        self.dec16 = conv_bn_relu(c16, c8)
        self.dec8 = conv_bn_relu(c8, c4)
        self.dec4 = conv_bn_relu(c4, stem)
        self.dec2 = conv_bn_relu(stem, stem)
        self.up1 = Upsample(stem, 2, spec.upsample)
        self.dec1 = conv_bn_relu(stem, stem)
        self.classifier = nn.Conv2d(stem, spec.num_classes, 1)
        _init_weights(nn.ModuleList([self.project, self.dec16, self.dec8, self.dec4, self.dec2, self.dec1, self.classifier]))

    def unpooled(self, taps):
        """Yield the sparse map after each unpool, before its convolution."""
        idx, sizes = taps.indices, taps.pre_pool_sizes
        x = self.project(taps.features[3])
        for k, conv in zip((3, 2, 1, 0), (self.dec16, self.dec8, self.dec4, self.dec2)):
            sparse = max_unpool(x, idx[k], sizes[k][-2:])
            yield sparse
            x = conv(sparse)
        yield x

    def decode(self, taps, size):
        *_, x = self.unpooled(taps)
        x = self.dec1(self.up1(x, size))
        return self.classifier(x)


class PSPNet(SegmentationModel):
    """Pyramid pooling on the stride-32 tap, a fusion conv, then a plain
    bilinear-upsample + conv decoder (no encoder skips)."""

    def __init__(self, spec):
        super().__init__(spec)
        c4, c8, c16, c32 = spec.backbone_widths
        self.ppm = PyramidPooling(c32, spec.pyramid_bins, branch_channels=c32 // 4)
        d = c4
        self.fuse = conv_bn_relu(self.ppm.out_channels, d)
        widths = [d, d // 2, d // 2, d // 4, d // 4, d // 4]
        mode = spec.upsample
        self.ups = nn.ModuleList(Upsample(widths[i], 2, mode) for i in range(5))
        self.decoder = nn.ModuleList(conv_bn_relu(widths[i], widths[i + 1]) for i in range(5))
        self.classifier = nn.Conv2d(widths[-1], spec.num_classes, 1)
        _init_weights(nn.ModuleList([self.fuse, self.decoder, self.classifier]))

    def decode(self, taps, size):
        x = self.fuse(self.ppm(taps.features[3]))
        for i, (up, conv) in enumerate(zip(self.ups, self.decoder)):
            x = conv(up(x, size if i == 4 else None))
        return self.classifier(x)


class RAGNet(SegmentationModel):
    """Segmentation unit of the hybrid analysis/grading network.

    All four taps enter through 1x1 lateral connections; the top-down path
    upsamples x2 and adds each lateral. ``encoder`` is exposed so a
    classification head could share the same feature extractor.
    """

    def __init__(self, spec):
        super().__init__(spec)
        c4, c8, c16, c32 = spec.backbone_widths
        d = c4
        self.laterals = nn.ModuleList(nn.Conv2d(c, d, 1) for c in (c4, c8, c16, c32))
        self.smooth = nn.ModuleList(conv_bn_relu(d, d) for _ in range(3))
        mode = spec.upsample
        self.ups = nn.ModuleList(Upsample(d, 2, mode) for _ in range(3))
        self.head_ups = nn.ModuleList([Upsample(d, 2, mode), Upsample(d // 2, 2, mode)])
        self.head = nn.ModuleList([conv_bn_relu(d, d // 2), conv_bn_relu(d // 2, d // 2)])
        self.classifier = nn.Conv2d(d // 2, spec.num_classes, 1)
        _init_weights(nn.ModuleList([self.laterals, self.smooth, self.head, self.classifier]))

    def features(self, taps):
        f = taps.features
        x = self.laterals[3](f[3])
        for i in (2, 1, 0):
            x = self.ups[i](x, f[i].shape[-2:]) + self.laterals[i](f[i])
            x = self.smooth[i](x)
        return x

    def decode(self, taps, size):
        x = self.features(taps)
        x = self.head[0](self.head_ups[0](x))
        x = self.head[1](self.head_ups[1](x, size))
        return self.classifier(x)
