"""Manifests, the seven-dataset registry, split audit and dataset groups.

Manifest files are line oriented and UTF-8::

    scan_id|dataset_id|modality|image_ref|mask_ref|split|pathology
    rab1-0001|RabbaniI|OCT|images/rab1-0001.png|masks/rab1-0001.png|train|DME
    rab2-0001|RabbaniII|fundus|images/rab2-0001.png||test|normal

The first non-comment line must be the header above. ``#`` lines and blank
lines are ignored. An empty ``mask_ref`` marks a healthy scan. Relative
references are resolved against the manifest's directory on load.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .core import DatasetId, MaskImage, Modality, ScanRecord, Split, default_class_map

FIELDS = ("scan_id", "dataset_id", "modality", "image_ref", "mask_ref", "split", "pathology")
HEADER = "|".join(FIELDS)


class ManifestError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class DuplicateScanError(ManifestError):
    pass


class UnknownDatasetError(ManifestError):
    pass


class EmptyManifestError(ManifestError):
    pass


@dataclass(frozen=True)
class SplitCounts:
    oct_train: int = 0
    oct_test: int = 0
    fundus_train: int = 0
    fundus_test: int = 0

    @property
    def train(self) -> int:
        return self.oct_train + self.fundus_train

    @property
    def test(self) -> int:
        return self.oct_test + self.fundus_test

    @property
    def oct(self) -> int:
        return self.oct_train + self.oct_test

    @property
    def fundus(self) -> int:
        return self.fundus_train + self.fundus_test

    @property
    def total(self) -> int:
        return self.train + self.test


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ScanRecord, ...]
    source: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.scan_id in seen:
                raise DuplicateScanError(f"duplicate scan_id {r.scan_id!r}")
            seen.add(r.scan_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ScanRecord]:
        return iter(self.records)

    @cached_property
    def dataset_counts(self) -> Mapping[DatasetId, SplitCounts]:
        tally = Counter((r.dataset_id, r.modality, r.split) for r in self.records)
        out = {}
        for ds in sorted({r.dataset_id for r in self.records}, key=_dataset_order):
            out[ds] = SplitCounts(
                oct_train=tally[(ds, Modality.OCT, Split.TRAIN)],
                oct_test=tally[(ds, Modality.OCT, Split.TEST)],
                fundus_train=tally[(ds, Modality.FUNDUS, Split.TRAIN)],
                fundus_test=tally[(ds, Modality.FUNDUS, Split.TEST)],
            )
        return out

    def filter(self, *, split: Optional[Split | str] = None, modality: Optional[Modality | str] = None,
               datasets: Optional[Iterable[DatasetId | str]] = None) -> "DatasetManifest":
        split = Split(split) if split is not None else None
        modality = Modality(modality) if modality is not None else None
        ds = {DatasetId(d) for d in datasets} if datasets is not None else None
        keep = [
            r for r in self.records
            if (split is None or r.split == split)
            and (modality is None or r.modality == modality)
            and (ds is None or r.dataset_id in ds)
        ]
        return DatasetManifest(tuple(keep), self.source)

    def get(self, scan_id: str) -> ScanRecord:
        for r in self.records:
            if r.scan_id == scan_id:
                return r
        raise KeyError(scan_id)


def _dataset_order(ds: DatasetId) -> int:
    return list(DatasetId).index(ds)


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def _resolve(ref: str, base: Optional[Path]) -> str:
    if base is None or not ref:
        return ref
    p = Path(ref)
    return ref if p.is_absolute() else str(base / p)


def iter_manifest_lines(lines: Iterable[str], base: Optional[Path] = None) -> Iterator[ScanRecord]:
    """Parse manifest lines lazily, one record at a time."""
    header_seen = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if not header_seen:
            if line.strip() != HEADER:
                raise ManifestError(f"expected header {HEADER!r}, got {line.strip()!r}", lineno)
            header_seen = True
            continue
        parts = line.split("|")
        if len(parts) != len(FIELDS):
            raise ManifestError(f"expected {len(FIELDS)} '|'-separated fields, got {len(parts)}", lineno)
        scan_id, dataset_id, modality, image_ref, mask_ref, split, pathology = (p.strip() for p in parts)
        try:
            ds = DatasetId(dataset_id)
        except ValueError:
            valid = ", ".join(d.value for d in DatasetId)
            raise UnknownDatasetError(f"unknown dataset {dataset_id!r} (valid: {valid})", lineno) from None
        try:
            yield ScanRecord(scan_id, ds, Modality(modality), _resolve(image_ref, base),
                             _resolve(mask_ref, base) or None, Split(split), pathology)
        except ValueError as exc:
            raise ManifestError(str(exc), lineno) from None
    if not header_seen:
        raise EmptyManifestError("empty manifest")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for rec in iter_manifest_lines(fh, base=path.parent):
            if rec.scan_id in seen:
                raise DuplicateScanError(f"duplicate scan_id {rec.scan_id!r} (first seen as record {seen[rec.scan_id]})")
            seen[rec.scan_id] = len(records) + 1
            records.append(rec)
    return DatasetManifest(tuple(records), str(path))


def parse_manifest(text: str, base: Optional[Path] = None) -> DatasetManifest:
    return DatasetManifest(tuple(iter_manifest_lines(io.StringIO(text), base)))


def write_manifest(records: Iterable[ScanRecord], path, relative_to: Optional[Path] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(relative_to) if relative_to is not None else None

    def rel(ref: Optional[str]) -> str:
        if not ref:
            return ""
        if base is not None:
            try:
                return Path(ref).relative_to(base).as_posix()
            except ValueError:
                pass
        return ref

    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(HEADER + "\n")
        for r in records:
            fields = (r.scan_id, r.dataset_id.value, r.modality.value, rel(r.image_ref), rel(r.mask_ref), r.split.value, r.pathology)
            for f in fields:
                if "|" in f or "\n" in f:
                    raise ManifestError(f"field {f!r} of {r.scan_id} contains a separator")
            fh.write("|".join(fields) + "\n")
    return path


# ---------------------------------------------------------------------------
# Registry and audit
# ---------------------------------------------------------------------------


def _counts(oct_total: int, fundus_total: int, oct_train: int, fundus_train: int) -> SplitCounts:
    return SplitCounts(oct_train, oct_total - oct_train, fundus_train, fundus_total - fundus_train)


_REGISTRY = {
    DatasetId.RABBANI_I: _counts(4_241, 148, 1_061, 37),
    DatasetId.RABBANI_II: _counts(12_800, 100, 0, 0),  # healthy only, used solely for testing
    DatasetId.DUKE_I: _counts(38_400, 0, 300, 0),
    DatasetId.DUKE_II: _counts(610, 0, 305, 0),
    DatasetId.DUKE_III: _counts(3_231, 0, 3_048, 0),
    DatasetId.BIOMISA: _counts(5_324, 115, 1_299, 29),
    DatasetId.ZHANG: _counts(109_309, 0, 108_309, 0),
}


def expected_registry() -> dict[DatasetId, SplitCounts]:
    """Published per-dataset totals and train/test allocations."""
    return dict(_REGISTRY)


@dataclass(frozen=True)
class AuditRow:
    dataset_id: DatasetId
    expected: SplitCounts
    actual: SplitCounts

    @property
    def deltas(self) -> dict[str, int]:
        keys = ("oct_train", "oct_test", "fundus_train", "fundus_test")
        return {k: getattr(self.actual, k) - getattr(self.expected, k) for k in keys}

    @property
    def ok(self) -> bool:
        return not any(self.deltas.values())


@dataclass(frozen=True)
class AuditReport:
    rows: tuple[AuditRow, ...]
    totals: Mapping[str, int]
    expected_totals: Mapping[str, int]

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.ok for r in self.rows)

    def failures(self) -> list[AuditRow]:
        return [r for r in self.rows if not r.ok]

    def to_text(self) -> str:
        head = f"{'dataset':<10} {'oct_train':>10} {'oct_test':>10} {'fundus_train':>12} {'fundus_test':>11}  status"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            d = r.deltas
            cells = []
            for k, w in (("oct_train", 10), ("oct_test", 10), ("fundus_train", 12), ("fundus_test", 11)):
                val = getattr(r.actual, k)
                cells.append(f"{val if not d[k] else f'{val}({d[k]:+d})':>{w}}")
            lines.append(f"{r.dataset_id.value:<10} " + " ".join(cells) + ("  ok" if r.ok else "  MISMATCH"))
        lines.append("")
        for k in ("fundus_total", "oct_total", "fundus_train", "oct_train", "fundus_test", "oct_test"):
            lines.append(f"{k:<13} {self.totals[k]:>8,} (expected {self.expected_totals[k]:,})")
        lines.append("")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)

    def to_rows(self) -> list[dict]:
        out = []
        for r in self.rows:
            row = {"dataset_id": r.dataset_id.value}
            for k in ("oct_train", "oct_test", "fundus_train", "fundus_test"):
                row[k] = getattr(r.actual, k)
                row[f"expected_{k}"] = getattr(r.expected, k)
                row[f"delta_{k}"] = r.deltas[k]
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.to_rows()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["dataset_id"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "rows": self.to_rows(), "totals": dict(self.totals),
                           "expected_totals": dict(self.expected_totals)}, indent=2)


def _totals(counts: Iterable[SplitCounts]) -> dict[str, int]:
    counts = list(counts)
    t = {
        "fundus_train": sum(c.fundus_train for c in counts),
        "fundus_test": sum(c.fundus_test for c in counts),
        "oct_train": sum(c.oct_train for c in counts),
        "oct_test": sum(c.oct_test for c in counts),
    }
    t["fundus_total"] = t["fundus_train"] + t["fundus_test"]
    t["oct_total"] = t["oct_train"] + t["oct_test"]
    return t


def audit_splits(manifest: DatasetManifest) -> AuditReport:
    """Compare manifest counts to the registry, dataset by dataset.

    Datasets absent from the registry (e.g. ``synthetic``) are expected to
    have zero records, so their presence fails the audit.
    """
    registry = expected_registry()
    actual = manifest.dataset_counts
    ids = sorted(set(registry) | set(actual), key=_dataset_order)
    rows = tuple(AuditRow(ds, registry.get(ds, SplitCounts()), actual.get(ds, SplitCounts())) for ds in ids)
    return AuditReport(rows, _totals(actual.values()), _totals(registry.values()))


def registry_manifest_records(root: str = "data") -> Iterator[ScanRecord]:
    """Placeholder records laid out exactly per the registry (no image files)."""
    for ds, c in expected_registry().items():
        n = 0
        for modality, split, count in ((Modality.OCT, Split.TRAIN, c.oct_train), (Modality.OCT, Split.TEST, c.oct_test),
                                       (Modality.FUNDUS, Split.TRAIN, c.fundus_train), (Modality.FUNDUS, Split.TEST, c.fundus_test)):
            for _ in range(count):
                n += 1
                sid = f"{ds.value}-{n:06d}"
                healthy = ds == DatasetId.RABBANI_II
                yield ScanRecord(sid, ds, modality, f"{root}/{ds.value}/{sid}.png",
                                 None if healthy else f"{root}/{ds.value}/{sid}_mask.png", split,
                                 "normal" if healthy else "unspecified")


# ---------------------------------------------------------------------------
# Groups
# ---------------------------------------------------------------------------


class GroupId(str, Enum):
    R = "R"
    D = "D"
    Z = "Z"
    B = "B"


GROUPS: Mapping[GroupId, frozenset[DatasetId]] = {
    GroupId.R: frozenset({DatasetId.RABBANI_I, DatasetId.RABBANI_II}),
    GroupId.D: frozenset({DatasetId.DUKE_I, DatasetId.DUKE_II, DatasetId.DUKE_III}),
    GroupId.Z: frozenset({DatasetId.ZHANG}),
    GroupId.B: frozenset({DatasetId.BIOMISA}),
}


def group(manifest: DatasetManifest, group_id: GroupId | str) -> DatasetManifest:
    return manifest.filter(datasets=GROUPS[GroupId(group_id)])


# ---------------------------------------------------------------------------
# Image and mask loading
# ---------------------------------------------------------------------------


class UnreadableImageError(OSError):
    pass


def load_image(path, size: Optional[Sequence[int]] = None) -> np.ndarray:
    """Load a raster as float32 HxWx3 in [0, 1].

    Grayscale (OCT) images are replicated to three channels. ``size`` is
    (H, W); resizing is bilinear.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and (im.height, im.width) != tuple(size):
                im = im.resize((int(size[1]), int(size[0])), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise UnreadableImageError(f"cannot read image {path}: {exc}") from exc
    return arr


def image_size(path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.height, im.width
    except OSError as exc:
        raise UnreadableImageError(f"cannot read image {path}: {exc}") from exc


def resize_labels(labels: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resize of a label grid to (H, W)."""
    labels = np.asarray(labels)
    if labels.shape == tuple(size):
        return labels.astype(np.uint8, copy=False)
    im = Image.fromarray(labels.astype(np.uint8), mode="L")
    return np.asarray(im.resize((int(size[1]), int(size[0])), Image.NEAREST), dtype=np.uint8)


def load_mask(record: ScanRecord, size: Optional[Sequence[int]] = None) -> MaskImage:
    """Ground truth for a record; healthy records get an all-background mask."""
    if record.mask_ref is None:
        h, w = size if size is not None else image_size(record.image_ref)
        return MaskImage.blank(int(h), int(w))
    try:
        with Image.open(record.mask_ref) as im:
            labels = np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise UnreadableImageError(f"cannot read mask {record.mask_ref}: {exc}") from exc
    if size is not None:
        labels = resize_labels(labels, size)
    return MaskImage(labels)


def save_mask(mask, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# Synthetic fixtures
# ---------------------------------------------------------------------------

# Per-class grey levels (OCT) and RGB tints (fundus) of pseudo-lesions.
_OCT_LEVEL = {0: 0.45, 1: 0.05, 2: 0.22, 3: 0.95, 4: 0.75, 5: 0.60}
_FUNDUS_TINT = {
    0: (0.55, 0.30, 0.20),
    1: (0.15, 0.05, 0.05),
    2: (0.90, 0.85, 0.20),
    3: (0.95, 0.95, 0.70),
    4: (0.85, 0.55, 0.75),
    5: (0.25, 0.60, 0.25),
}
CELL = 32


@dataclass(frozen=True)
class FixtureSpec:
    n_scans: int
    size: tuple[int, int] = (64, 64)
    seed: int = 0
    lesions_per_scan: int = 2
    margin: int = 2
    noise: float = 0.04
    dataset_id: DatasetId = DatasetId.SYNTHETIC
    split: Split = Split.TRAIN
    healthy: bool = False
    modalities: tuple[Modality, ...] = (Modality.FUNDUS, Modality.OCT)
    prefix: str = "syn"
    first_class: int = 0


def _render_scan(rng: np.random.Generator, spec: FixtureSpec, classes: Sequence[int], modality: Modality):
    h, w = spec.size
    rows, cols = h // CELL, w // CELL
    labels = np.zeros((h, w), dtype=np.uint8)
    cells = rng.choice(rows * cols, size=min(len(classes), rows * cols), replace=False)
    for cls, cell in zip(classes, cells):
        r0, c0 = (int(cell) // cols) * CELL, (int(cell) % cols) * CELL
        top, left, bottom, right = (int(v) for v in rng.integers(0, spec.margin + 1, size=4))
        labels[r0 + top: r0 + CELL - bottom, c0 + left: c0 + CELL - right] = cls
    noise = rng.normal(0.0, spec.noise, size=(h, w))
    if modality == Modality.OCT:
        base = np.vectorize(_OCT_LEVEL.get)(labels).astype(np.float64) + noise
        img = np.clip(base, 0, 1)
        pixels = np.round(img * 255).astype(np.uint8)
    else:
        tint = np.array([_FUNDUS_TINT[i] for i in range(len(_FUNDUS_TINT))])
        img = np.clip(tint[labels] + noise[..., None], 0, 1)
        pixels = np.round(img * 255).astype(np.uint8)
    return pixels, labels


def synth_fixture(out_dir, n_scans: int, size: Sequence[int] = (64, 64), seed: int = 0, **options) -> DatasetManifest:
    """Write a deterministic synthetic set of images, masks and a manifest.

    Each scan carries ``lesions_per_scan`` rectangular pseudo-lesions placed
    in distinct 32x32 cells; lesion classes rotate through 1..5 across the
    set so ten scans cover every class. Modalities alternate fundus/OCT.
    Returns the manifest as loaded back from ``out_dir/manifest.txt``.
    """
    if n_scans < 1:
        raise ValueError("n_scans must be >= 1")
    spec = FixtureSpec(n_scans=n_scans, size=(int(size[0]), int(size[1])), seed=seed, **options)
    if spec.size[0] % CELL or spec.size[1] % CELL:
        raise ValueError(f"fixture size must be a multiple of {CELL}, got {spec.size}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    k = 0 if spec.healthy else spec.lesions_per_scan
    for i in range(n_scans):
        classes = [((spec.first_class + i * k + j) % 5) + 1 for j in range(k)]
        modality = spec.modalities[i % len(spec.modalities)]
        pixels, labels = _render_scan(rng, spec, classes, modality)
        sid = f"{spec.prefix}-{i:04d}"
        img_path = out / "images" / f"{sid}.png"
        Image.fromarray(pixels, mode="L" if pixels.ndim == 2 else "RGB").save(img_path)
        mask_path = None
        if not spec.healthy:
            mask_path = out / "masks" / f"{sid}.png"
            save_mask(labels, mask_path)
        pathology = "normal" if spec.healthy else "+".join(default_class_map()[c].name for c in classes)
        records.append(ScanRecord(sid, spec.dataset_id, modality, str(img_path),
                                  None if mask_path is None else str(mask_path), spec.split, pathology))
    write_manifest(records, out / "manifest.txt", relative_to=out)
    return load_manifest(out / "manifest.txt")


def concat_manifests(manifests: Sequence[DatasetManifest], source: Optional[str] = None) -> DatasetManifest:
    records = [r for m in manifests for r in m.records]
    return DatasetManifest(tuple(records), source)
