"""50-layer residual encoder with taps at strides 4, 8, 16 and 32.

Two downsampling styles share one parameter layout:

* ``"conv"``: standard ResNet, stride-2 first bottleneck per stage and a
  3x3/2 max-pool in the stem.
* ``"pool"``: every downsampling after the stem convolution is a 2x2/2
  max-pool that records its argmax indices, and all bottlenecks run at
  stride 1. SegNet needs these indices for its decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

TAP_STRIDES = (4, 8, 16, 32)


@dataclass
class EncoderTaps:
    features: tuple[torch.Tensor, ...]
    channels: tuple[int, ...]
    strides: tuple[int, ...] = TAP_STRIDES
    # Pool-mode only: indices[k] maps the pooled map feeding stage k back onto
    # the pre-pool map whose spatial size is pre_pool_sizes[k].
    indices: Optional[tuple[torch.Tensor, ...]] = None
    pre_pool_sizes: Optional[tuple[torch.Size, ...]] = None
    stem: Optional[torch.Tensor] = None


class Bottleneck(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        mid = out_ch // 4
        self.conv1 = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResNetEncoder(nn.Module):
    def __init__(self, widths: Sequence[int] = (256, 512, 1024, 2048), blocks: Sequence[int] = (3, 4, 6, 3),
                 downsample: str = "conv", in_channels: int = 3):
        super().__init__()
        if downsample not in ("conv", "pool"):
            raise ValueError(f"downsample must be 'conv' or 'pool', got {downsample!r}")
        self.widths = tuple(widths)
        self.blocks = tuple(blocks)
        self.downsample = downsample
        self.stem_width = max(8, widths[0] // 4)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, self.stem_width, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(self.stem_width),
            nn.ReLU(inplace=True),
        )
        if downsample == "conv":
            self.stem_pool = nn.MaxPool2d(3, stride=2, padding=1)
        else:
            self.stem_pool = nn.MaxPool2d(2, stride=2, return_indices=True)
        self.pool = nn.MaxPool2d(2, stride=2, return_indices=True)
        stages = []
        in_ch = self.stem_width
        for k, (w, n) in enumerate(zip(widths, blocks)):
            stride = 2 if (k > 0 and downsample == "conv") else 1
            layers = [Bottleneck(in_ch, w, stride)]
            layers += [Bottleneck(w, w) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            in_ch = w
        self.stages = nn.ModuleList(stages)
        _init_weights(self)

    @property
    def channels(self) -> tuple[int, ...]:
        return self.widths

    def forward(self, x: torch.Tensor) -> EncoderTaps:
        x = self.stem(x)
        stem = x
        feats, indices, sizes = [], [], []
        if self.downsample == "conv":
            x = self.stem_pool(x)
        else:
            sizes.append(x.shape)
            x, idx = self.stem_pool(x)
            indices.append(idx)
        for k, stage in enumerate(self.stages):
            if k > 0 and self.downsample == "pool":
                sizes.append(x.shape)
                x, idx = self.pool(x)
                indices.append(idx)
            x = stage(x)
            feats.append(x)
        return EncoderTaps(
            features=tuple(feats),
            channels=self.widths,
            indices=tuple(indices) if indices else None,
            pre_pool_sizes=tuple(sizes) if sizes else None,
            stem=stem,
        )


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
