"""Decoder building blocks shared by the architectures."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class UnpoolIndexError(ValueError):
    pass


def conv_bn_relu(in_ch: int, out_ch: int, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def resize(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def bilinear_kernel(factor: int) -> torch.Tensor:
    """2-D bilinear interpolation kernel of size 2*factor - factor % 2."""
    size = 2 * factor - factor % 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = torch.arange(size, dtype=torch.float64)
    filt = 1 - (og - center).abs() / factor
    return (filt[:, None] * filt[None, :]).float()


class Upsample(nn.Module):
    """Fixed bilinear resize, or a learnable depthwise transposed convolution
    initialised to the bilinear kernel when ``mode == "transposed"``."""

    def __init__(self, channels: int, factor: int, mode: str = "bilinear"):
        super().__init__()
        self.factor = factor
        self.mode = mode
        if mode == "transposed":
            k = 2 * factor - factor % 2
            pad = (k - factor + 1) // 2
            self.deconv = nn.ConvTranspose2d(channels, channels, k, stride=factor, padding=pad,
                                             output_padding=(k - factor) % 2, groups=channels, bias=False)
            with torch.no_grad():
                self.deconv.weight.copy_(bilinear_kernel(factor).expand(channels, 1, k, k))
        elif mode != "bilinear":
            raise ValueError(f"unknown upsample mode {mode!r}")

    def forward(self, x: torch.Tensor, size: Optional[Sequence[int]] = None) -> torch.Tensor:
        if size is None:
            size = (x.shape[-2] * self.factor, x.shape[-1] * self.factor)
        if self.mode == "transposed":
            return resize(self.deconv(x), size)
        return resize(x, size)


# ---------------------------------------------------------------------------
# Pyramid pooling
# ---------------------------------------------------------------------------


class PyramidPooling(nn.Module):
    """Average-pool to each bin size, project, upsample, concatenate with the
    input. Output channels: ``in_channels + len(bins) * branch_channels``."""

    def __init__(self, in_channels: int, bins: Sequence[int] = (1, 2, 3, 6), branch_channels: Optional[int] = None):
        super().__init__()
        if len(bins) != 4:
            raise ValueError(f"pyramid pooling expects 4 bin sizes, got {tuple(bins)}")
        self.bins = tuple(int(b) for b in bins)
        self.branch_channels = branch_channels or max(1, in_channels // len(self.bins))
        # No batch norm here: a 1x1 bin with batch size 1 has no batch statistics.
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(in_channels, self.branch_channels, 1), nn.ReLU(inplace=True)) for _ in self.bins
        )
        self.out_channels = in_channels + len(self.bins) * self.branch_channels

    def pooled(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Pre-projection pyramid levels at their own bin resolution."""
        return [F.adaptive_avg_pool2d(x, b) for b in self.bins]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        outs = [x]
        for level, branch in zip(self.pooled(x), self.branches):
            outs.append(resize(branch(level), size))
        return torch.cat(outs, dim=1)


def pyramid_pool(features: torch.Tensor, module: PyramidPooling) -> torch.Tensor:
    return module(features)


# ---------------------------------------------------------------------------
# Index-guided unpooling
# ---------------------------------------------------------------------------


def check_unpool_indices(indices: torch.Tensor, target_size: Sequence[int], kernel: int = 2) -> None:
    """Raise if any index points outside its own pooling window."""
    h_out, w_out = int(target_size[-2]), int(target_size[-1])
    ph, pw = indices.shape[-2:]
    rows = torch.div(indices, w_out, rounding_mode="floor")
    cols = indices % w_out
    win_r = torch.arange(ph, device=indices.device).view(ph, 1) * kernel
    win_c = torch.arange(pw, device=indices.device).view(1, pw) * kernel
    bad = (rows < win_r) | (rows >= win_r + kernel) | (cols < win_c) | (cols >= win_c + kernel) | (rows >= h_out) | (indices < 0)
    if bool(bad.any()):
        pos = tuple(int(v) for v in bad.nonzero()[0])
        raise UnpoolIndexError(f"pooling index {int(indices[pos])} at {pos} lies outside its {kernel}x{kernel} window")


def max_unpool(pooled: torch.Tensor, indices: torch.Tensor, target_size: Sequence[int], check: bool = True) -> torch.Tensor:
    """Place each pooled value at its recorded argmax position; zeros elsewhere.

    ``indices`` are flat offsets into the (H, W) plane of ``target_size`` as
    produced by ``nn.MaxPool2d(2, 2, return_indices=True)``.
    """
    if pooled.shape != indices.shape:
        raise UnpoolIndexError(f"values {tuple(pooled.shape)} and indices {tuple(indices.shape)} differ in shape")
    h_out, w_out = int(target_size[-2]), int(target_size[-1])
    if check:
        check_unpool_indices(indices, (h_out, w_out))
    n, c = pooled.shape[:2]
    flat = pooled.new_zeros(n, c, h_out * w_out)
    flat = flat.scatter(2, indices.reshape(n, c, -1), pooled.reshape(n, c, -1))
    return flat.view(n, c, h_out, w_out)


# ---------------------------------------------------------------------------
# FCN score fusion
# ---------------------------------------------------------------------------

UpFn = Callable[[torch.Tensor, Sequence[int]], torch.Tensor]


def fcn_fuse(score32: torch.Tensor, out_size: Sequence[int], variant: str = "fcn32",
             score16: Optional[torch.Tensor] = None, score8: Optional[torch.Tensor] = None,
             ups: Optional[Sequence[UpFn]] = None) -> torch.Tensor:
    """Fuse per-stride class scores into an input-resolution score map.

    fcn32: one x32 upsample of the stride-32 scores. fcn8: x2 and add the
    stride-16 scores, x2 and add the stride-8 scores, then x8.
    """
    if variant == "fcn32":
        up = ups[0] if ups else resize
        return up(score32, out_size)
    if variant != "fcn8":
        raise ValueError(f"unknown FCN variant {variant!r}")
    if score16 is None or score8 is None:
        raise ValueError("fcn8 needs stride-16 and stride-8 scores")
    up2a, up2b, up8 = ups if ups else (resize, resize, resize)
    s = up2a(score32, score16.shape[-2:]) + score16
    s = up2b(s, score8.shape[-2:]) + score8
    return up8(s, out_size)
