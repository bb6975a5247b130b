"""Shared data model: lesion classes, scan records, masks, run configuration
and metric reports.

Everything here is immutable after construction so it can be handed to
evaluation workers without copying.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import yaml

CLASSMAP_FORMAT = "lesionbench.classmap/1"
RUNCONFIG_FORMAT = "lesionbench.runconfig/1"

BACKGROUND = "background"
LESION_NAMES = ("IRF", "SRF", "HE", "drusen", "CA")

# Frozen index order. Stored in every classmap file; never reorder.
_DEFAULT_ORDER = (BACKGROUND,) + LESION_NAMES

# Overlay colors per lesion name. Background has none.
LESION_COLORS: Mapping[str, tuple[int, int, int]] = {
    "HE": (0, 0, 255),  # blue
    "IRF": (255, 0, 0),  # red
    "SRF": (255, 255, 0),  # yellow
    "CA": (0, 255, 0),  # green
    "drusen": (255, 105, 180),  # pink
}

NUM_CLASSES = len(_DEFAULT_ORDER)


class Modality(str, Enum):
    FUNDUS = "fundus"
    OCT = "OCT"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class DatasetId(str, Enum):
    RABBANI_I = "RabbaniI"
    RABBANI_II = "RabbaniII"
    DUKE_I = "DukeI"
    DUKE_II = "DukeII"
    DUKE_III = "DukeIII"
    BIOMISA = "BIOMISA"
    ZHANG = "Zhang"
    SYNTHETIC = "synthetic"


class Architecture(str, Enum):
    RAGNET = "RAGNet"
    PSPNET = "PSPNet"
    SEGNET = "SegNet"
    UNET = "UNet"
    FCN8 = "FCN8"
    FCN32 = "FCN32"

    @classmethod
    def parse(cls, value: "str | Architecture") -> "Architecture":
        try:
            return cls(value)
        except ValueError:
            for a in cls:
                if isinstance(value, str) and a.value.lower() == value.strip().lower():
                    return a
            valid = ", ".join(a.value for a in cls)
            raise ValueError(f"unknown architecture {value!r}; valid values: {valid}") from None


class ConfigError(ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# Class map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassEntry:
    index: int
    name: str
    color: Optional[tuple[int, int, int]]


@dataclass(frozen=True)
class ClassMap:
    entries: tuple[ClassEntry, ...]

    def __post_init__(self):
        problems = []
        if len(self.entries) != NUM_CLASSES:
            problems.append(f"expected {NUM_CLASSES} entries, got {len(self.entries)}")
        indices = [e.index for e in self.entries]
        if sorted(indices) != list(range(len(self.entries))):
            problems.append(f"indices must be unique and contiguous from 0, got {indices}")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            problems.append(f"duplicate class names in {names}")
        if set(names) != set(_DEFAULT_ORDER):
            problems.append(f"class names must be {sorted(_DEFAULT_ORDER)}, got {sorted(names)}")
        for e in self.entries:
            if e.name == BACKGROUND:
                if e.index != 0:
                    problems.append("background must have index 0")
                if e.color is not None:
                    problems.append("background has no overlay color")
            elif e.name in LESION_COLORS and e.color != LESION_COLORS[e.name]:
                problems.append(f"{e.name} color must be {LESION_COLORS[e.name]}, got {e.color}")
        if problems:
            raise ConfigError(problems)
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e.index)))

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> ClassEntry:
        return self.entries[index]

    def __iter__(self):
        return iter(self.entries)

    def index_of(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.index
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    @property
    def lesion_indices(self) -> tuple[int, ...]:
        return tuple(e.index for e in self.entries if e.name != BACKGROUND)

    def color_table(self) -> np.ndarray:
        """(N, 3) uint8 colors; the background row is zero and must not be drawn."""
        table = np.zeros((len(self), 3), dtype=np.uint8)
        for e in self.entries:
            if e.color is not None:
                table[e.index] = e.color
        return table

    def to_dict(self) -> dict:
        return {
            "format": CLASSMAP_FORMAT,
            "classes": [
                {"index": e.index, "name": e.name, "color": None if e.color is None else list(e.color)}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ClassMap":
        if data.get("format") != CLASSMAP_FORMAT:
            raise ConfigError([f"unsupported classmap format {data.get('format')!r}"])
        entries = []
        for item in data["classes"]:
            color = item.get("color")
            entries.append(ClassEntry(int(item["index"]), str(item["name"]), None if color is None else tuple(int(c) for c in color)))
        return cls(tuple(entries))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def loads(cls, text: str) -> "ClassMap":
        return cls.from_dict(yaml.safe_load(text))


def default_class_map() -> ClassMap:
    return ClassMap(tuple(ClassEntry(i, name, LESION_COLORS.get(name)) for i, name in enumerate(_DEFAULT_ORDER)))


# ---------------------------------------------------------------------------
# Scans and masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanRecord:
    """One fundus or OCT image with optional lesion mask.

    A record without ``mask_ref`` is a healthy scan; its ground truth is an
    all-background mask of the image's size.
    """

    scan_id: str
    dataset_id: DatasetId
    modality: Modality
    image_ref: str
    mask_ref: Optional[str]
    split: Split
    pathology: str = ""

    def __post_init__(self):
        object.__setattr__(self, "dataset_id", DatasetId(self.dataset_id))
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "split", Split(self.split))
        if not self.scan_id:
            raise ValueError("scan_id must be non-empty")
        if not self.image_ref:
            raise ValueError(f"{self.scan_id}: image_ref must be non-empty")
        if self.mask_ref == "":
            object.__setattr__(self, "mask_ref", None)

    @property
    def is_healthy(self) -> bool:
        return self.mask_ref is None


class MaskImage:
    """2-D grid of class indices (read-only)."""

    __slots__ = ("labels",)

    def __init__(self, labels):
        arr = np.array(labels, copy=True)
        if arr.dtype.kind not in "iu":
            if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError("mask labels must be integers")
            arr = arr.astype(np.int64)
        arr.setflags(write=False)
        self.labels = arr

    @classmethod
    def blank(cls, height: int, width: int) -> "MaskImage":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def height(self) -> int:
        return self.labels.shape[0] if self.labels.ndim >= 1 else 0

    @property
    def width(self) -> int:
        return self.labels.shape[1] if self.labels.ndim >= 2 else 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape

    def __array__(self, dtype=None, copy=None):
        return self.labels if dtype is None else self.labels.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, MaskImage):
            return NotImplemented
        return self.labels.shape == other.labels.shape and bool(np.array_equal(self.labels, other.labels))

    def __repr__(self):
        return f"MaskImage({self.height}x{self.width})"


@dataclass(frozen=True)
class Violation:
    kind: str  # "empty-dimensions" | "not-2d" | "invalid-label"
    message: str
    position: Optional[tuple[int, int]] = None


def validate_mask(mask, cmap: ClassMap) -> list[Violation]:
    """Check that a mask is a non-empty 2-D grid of valid class indices.

    Violations are returned as data; an empty list means the mask is valid.
    For invalid labels the (row, col) of the first offender is reported.
    """
    labels = mask.labels if isinstance(mask, MaskImage) else np.asarray(mask)
    if labels.ndim != 2:
        return [Violation("not-2d", f"mask must be 2-D, got shape {labels.shape}")]
    if labels.shape[0] == 0 or labels.shape[1] == 0:
        return [Violation("empty-dimensions", f"mask has empty dimensions {labels.shape}")]
    bad = (labels < 0) | (labels >= len(cmap))
    if np.any(bad):
        r, c = (int(v) for v in np.argwhere(bad)[0])
        return [Violation("invalid-label", f"label {int(labels[r, c])} at ({r}, {c}) is not a class index", (r, c))]
    return []


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

RESNET50_WIDTHS = (256, 512, 1024, 2048)
RESNET50_BLOCKS = (3, 4, 6, 3)
_TUPLE_FIELDS = ("input_size", "backbone_widths", "backbone_blocks", "pyramid_bins", "class_weights")


@dataclass(frozen=True)
class RunConfig:
    """One training/evaluation run.

    ``epochs`` has no default on purpose. Image sides must be multiples of 32
    because the encoder downsamples five times.
    """

    architecture: Architecture
    epochs: int
    backbone: str = "resnet50"
    input_size: tuple[int, int] = (512, 512)
    num_classes: int = NUM_CLASSES
    optimizer: str = "ADADELTA"
    learning_rate_mode: str = "default"
    batch_size: int = 8
    seed: int = 0
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    backbone_widths: tuple[int, ...] = RESNET50_WIDTHS
    backbone_blocks: tuple[int, ...] = RESNET50_BLOCKS
    pyramid_bins: tuple[int, ...] = (1, 2, 3, 6)
    upsample: str = "bilinear"
    pretrained: Optional[str] = None
    augment: bool = False
    class_weights: Optional[tuple[float, ...]] = None
    waive_audit: bool = False

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            value = getattr(self, name)
            if isinstance(value, list):
                object.__setattr__(self, name, tuple(value))
        errors = _runconfig_errors(self)
        if errors:
            raise ConfigError(errors)
        object.__setattr__(self, "architecture", Architecture.parse(self.architecture))

    def to_dict(self) -> dict:
        out = {"format": RUNCONFIG_FORMAT}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = dict(data)
        fmt = data.pop("format", RUNCONFIG_FORMAT)
        errors = []
        if fmt != RUNCONFIG_FORMAT:
            errors.append(f"unsupported config format {fmt!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in sorted(set(data) - known):
            errors.append(f"unknown config key {key!r}")
        for key in ("architecture", "epochs"):
            if key not in data:
                errors.append(f"missing required key {key!r}")
        kwargs = {k: v for k, v in data.items() if k in known}
        for key in _TUPLE_FIELDS:
            if isinstance(kwargs.get(key), list):
                kwargs[key] = tuple(kwargs[key])
        if errors:
            # Collect field-level problems as well so the user sees everything at once.
            probe = {"architecture": "UNet", "epochs": 1, **kwargs}
            errors.extend(_runconfig_errors(_Namespace(cls, probe)))
            raise ConfigError(errors)
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        data = yaml.safe_load(text)
        if not isinstance(data, dict):
            raise ConfigError(["config file must contain a key/value mapping"])
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


class _Namespace:
    """Attribute view over defaults + overrides, for validating raw dicts."""

    def __init__(self, cls, values):
        for f in dataclasses.fields(cls):
            if f.default is not dataclasses.MISSING:
                setattr(self, f.name, f.default)
        for k, v in values.items():
            setattr(self, k, v)


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _runconfig_errors(cfg) -> list[str]:
    errors = []
    try:
        Architecture.parse(cfg.architecture)
    except ValueError as exc:
        errors.append(str(exc))
    if not _is_int(cfg.epochs) or cfg.epochs < 0:
        errors.append(f"epochs must be a non-negative integer, got {cfg.epochs!r}")
    if cfg.backbone != "resnet50":
        errors.append(f"unsupported backbone {cfg.backbone!r}; only 'resnet50' is available")
    size = cfg.input_size
    if not (isinstance(size, tuple) and len(size) == 2 and all(_is_int(s) and s > 0 for s in size)):
        errors.append(f"input_size must be (H, W) positive integers, got {size!r}")
    elif any(s % 32 for s in size):
        errors.append(f"input_size {size} must have both sides divisible by 32")
    if cfg.num_classes != NUM_CLASSES:
        errors.append(f"num_classes must be {NUM_CLASSES}, got {cfg.num_classes!r}")
    if cfg.optimizer != "ADADELTA":
        errors.append(f"optimizer must be 'ADADELTA', got {cfg.optimizer!r}")
    if cfg.learning_rate_mode != "default":
        errors.append(f"learning_rate_mode must be 'default', got {cfg.learning_rate_mode!r}")
    if not _is_int(cfg.batch_size) or cfg.batch_size < 1:
        errors.append(f"batch_size must be a positive integer, got {cfg.batch_size!r}")
    if not _is_int(cfg.seed):
        errors.append(f"seed must be an integer, got {cfg.seed!r}")
    widths, blocks = cfg.backbone_widths, cfg.backbone_blocks
    if not (isinstance(widths, tuple) and len(widths) == 4 and all(_is_int(w) and w >= 8 and w % 4 == 0 for w in widths)):
        errors.append(f"backbone_widths must be 4 positive multiples of 4 (>= 8), got {widths!r}")
    if not (isinstance(blocks, tuple) and len(blocks) == 4 and all(_is_int(b) and b >= 1 for b in blocks)):
        errors.append(f"backbone_blocks must be 4 positive integers, got {blocks!r}")
    bins = cfg.pyramid_bins
    if not (isinstance(bins, tuple) and len(bins) == 4 and all(_is_int(b) and b >= 1 for b in bins)):
        errors.append(f"pyramid_bins must be 4 positive integers, got {bins!r}")
    if cfg.upsample not in ("bilinear", "transposed"):
        errors.append(f"upsample must be 'bilinear' or 'transposed', got {cfg.upsample!r}")
    cw = cfg.class_weights
    if cw is not None and not (isinstance(cw, tuple) and len(cw) == NUM_CLASSES and all(float(w) >= 0 for w in cw)):
        errors.append(f"class_weights must be {NUM_CLASSES} non-negative numbers, got {cw!r}")
    return errors


# ---------------------------------------------------------------------------
# Metric report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassScores:
    dice: Optional[float]
    iou: Optional[float]
    tp: Optional[int] = None
    fp: Optional[int] = None
    fn: Optional[int] = None
    tn: Optional[int] = None


@dataclass(frozen=True)
class MetricReport:
    """Scores for one model on one evaluation set.

    ``None`` marks a metric whose denominator was zero (class absent from
    both ground truth and prediction). Counts are pooled over the whole set
    before any division.
    """

    per_class: Mapping[str, ClassScores]
    mean_dice: Optional[float]
    mean_iou: Optional[float]
    micro_tpr: Optional[float]
    micro_ppv: Optional[float]
    micro_f1: Optional[float]
    tn_rate: Optional[float] = None
    provenance: Mapping[str, Any] = field(default_factory=dict)
    aggregation: str = "pixel counts pooled over the evaluation set; micro one-vs-rest over lesion classes"

    def get(self, metric: str) -> Optional[float]:
        """Look up ``mean_dice``, ``micro_f1``, ``dice:IRF``, ``iou:HE`` etc."""
        if ":" in metric:
            kind, name = metric.split(":", 1)
            if name not in self.per_class or kind not in ("dice", "iou"):
                raise KeyError(metric)
            return getattr(self.per_class[name], kind)
        aliases = {"tpr": "micro_tpr", "ppv": "micro_ppv", "f1": "micro_f1"}
        name = aliases.get(metric, metric)
        if name not in {"mean_dice", "mean_iou", "micro_tpr", "micro_ppv", "micro_f1", "tn_rate"}:
            raise KeyError(metric)
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {
            "per_class": {k: dataclasses.asdict(v) for k, v in self.per_class.items()},
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
            "micro_tpr": self.micro_tpr,
            "micro_ppv": self.micro_ppv,
            "micro_f1": self.micro_f1,
            "tn_rate": self.tn_rate,
            "provenance": dict(self.provenance),
            "aggregation": self.aggregation,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        return cls(
            per_class={k: ClassScores(**v) for k, v in data["per_class"].items()},
            mean_dice=data["mean_dice"],
            mean_iou=data["mean_iou"],
            micro_tpr=data["micro_tpr"],
            micro_ppv=data["micro_ppv"],
            micro_f1=data["micro_f1"],
            tn_rate=data.get("tn_rate"),
            provenance=data.get("provenance", {}),
            aggregation=data.get("aggregation", cls.aggregation),
        )
