"""Architecture zoo over a shared 50-layer residual encoder."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np
import torch

from ..core import NUM_CLASSES, RESNET50_BLOCKS, RESNET50_WIDTHS, Architecture, RunConfig
from .archs import FCN, PSPNet, RAGNet, SegmentationModel, SegNet, UNet
from .backbone import TAP_STRIDES, EncoderTaps, ResNetEncoder
from .blocks import PyramidPooling, UnpoolIndexError, fcn_fuse, max_unpool, pyramid_pool

__all__ = [
    "ModelSpec", "build", "forward", "parameter_count", "parameter_checksum", "load_backbone_weights",
    "SegmentationModel", "FCN", "PSPNet", "RAGNet", "SegNet", "UNet",
    "ResNetEncoder", "EncoderTaps", "TAP_STRIDES",
    "PyramidPooling", "pyramid_pool", "max_unpool", "fcn_fuse", "UnpoolIndexError",
]


@dataclass(frozen=True)
class ModelSpec:
    architecture: Architecture
    input_size: tuple[int, int] = (512, 512)
    num_classes: int = NUM_CLASSES
    backbone_widths: tuple[int, ...] = RESNET50_WIDTHS
    backbone_blocks: tuple[int, ...] = RESNET50_BLOCKS
    pyramid_bins: tuple[int, ...] = (1, 2, 3, 6)
    upsample: str = "bilinear"

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture.parse(self.architecture))
        for name in ("input_size", "backbone_widths", "backbone_blocks", "pyramid_bins"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}, got {self.num_classes}")
        if len(self.input_size) != 2 or any(s <= 0 or s % 32 for s in self.input_size):
            raise ValueError(f"input_size {self.input_size} must have both sides divisible by 32")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ModelSpec":
        return cls(cfg.architecture, cfg.input_size, cfg.num_classes, cfg.backbone_widths,
                   cfg.backbone_blocks, cfg.pyramid_bins, cfg.upsample)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["architecture"] = self.architecture.value
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def from_dict(cls, data) -> "ModelSpec":
        return cls(**data)


_BUILDERS = {
    Architecture.RAGNET: RAGNet,
    Architecture.PSPNET: PSPNet,
    Architecture.SEGNET: SegNet,
    Architecture.UNET: UNet,
    Architecture.FCN8: lambda spec: FCN(spec, "fcn8"),
    Architecture.FCN32: lambda spec: FCN(spec, "fcn32"),
}


def build(spec: ModelSpec, seed: int = 0) -> SegmentationModel:
    """Instantiate the network for ``spec`` with seeded initial weights.

    The global torch RNG is left untouched.
    """
    if not isinstance(spec, ModelSpec):
        raise TypeError(f"expected ModelSpec, got {type(spec).__name__}")
    try:
        builder = _BUILDERS[spec.architecture]
    except KeyError:
        raise ValueError(f"unsupported architecture {spec.architecture!r}") from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return builder(spec)


def forward(model: SegmentationModel, image) -> np.ndarray:
    """Scores for one H x W x 3 image as an H x W x num_classes array."""
    arr = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if arr.dim() != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {tuple(arr.shape)}")
    with torch.no_grad():
        scores = model(arr.permute(2, 0, 1).unsqueeze(0))
    return scores[0].permute(1, 2, 0).numpy()


def parameter_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_backbone_weights(model: SegmentationModel, path, strict: bool = True) -> None:
    """Load encoder weights from a ``torch.save``-d encoder state dict."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "encoder_state" in state:
        state = state["encoder_state"]
    model.encoder.load_state_dict(state, strict=strict)
