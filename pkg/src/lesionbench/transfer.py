"""Zero-shot transfer grid over dataset groups and architectures.

Each cell trains a fresh model on the train split of one group and reports
mean lesion IoU on the test split of another. Finished cells are stored
under ``<out_dir>/cells/<key>/cell.json`` where the key covers the pair,
the architecture and a digest of the cell's configuration and data, so a
rerun skips exactly the cells whose inputs have not changed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import Architecture, RunConfig
from .datasets import DatasetManifest, GroupId, audit_splits, group, load_mask
from .engine import AuditFailedError, evaluate, train
from .metrics import ConfusionAccumulator, build_report, tn_rate
from .published import SHORT_NAMES, TABLE_ORDER, TN_RATES

CELL_FORMAT = "lesionbench.cell/1"
MATRIX_FORMAT = "lesionbench.transfer/1"


class MissingGroupError(ValueError):
    pass


class CellError(RuntimeError):
    def __init__(self, cell_id: str, cause: BaseException):
        super().__init__(f"cell {cell_id}: {type(cause).__name__}: {cause}")
        self.cell_id = cell_id
        self.cause = cause


class IncompleteRowError(ValueError):
    pass


class NonHealthyScanError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Pairs and cells
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Pair:
    train: GroupId
    test: GroupId

    def __post_init__(self):
        object.__setattr__(self, "train", GroupId(self.train))
        object.__setattr__(self, "test", GroupId(self.test))
        if self.train == self.test:
            raise ValueError(f"identity pair {self.train.value}->{self.test.value} is not a transfer")

    @classmethod
    def parse(cls, value) -> "Pair":
        if isinstance(value, Pair):
            return value
        if isinstance(value, str):
            for sep in ("->", "→", ">", ","):
                if sep in value:
                    a, b = value.split(sep, 1)
                    return cls(a.strip(), b.strip())
            raise ValueError(f"cannot parse pair {value!r}; use e.g. 'R->D'")
        a, b = value
        return cls(a, b)

    def __str__(self) -> str:
        return f"{self.train.value}->{self.test.value}"


# Row order of the reference transfer table.
REFERENCE_PAIRS = tuple(Pair.parse(p) for p in (
    "R->D", "D->R", "R->Z", "Z->R", "B->R", "R->B", "Z->D", "D->Z", "D->B", "B->D", "B->Z", "Z->B",
))


def all_pairs(groups: Iterable = tuple(GroupId)) -> tuple[Pair, ...]:
    return tuple(Pair(a, b) for a, b in permutations(groups, 2))


@dataclass(frozen=True)
class TransferCell:
    pair: Pair
    architecture: Architecture
    mean_iou: float
    report: Optional[dict] = None
    seed: Optional[int] = None
    digest: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "pair", Pair.parse(self.pair))
        object.__setattr__(self, "architecture", Architecture.parse(self.architecture))
        if not 0.0 <= self.mean_iou <= 1.0:
            raise ValueError(f"mean_iou {self.mean_iou} outside [0, 1]")

    @property
    def train_group(self) -> GroupId:
        return self.pair.train

    @property
    def test_group(self) -> GroupId:
        return self.pair.test

    @property
    def cell_id(self) -> str:
        return f"{self.pair}/{self.architecture.value}"

    def to_dict(self) -> dict:
        return {"format": CELL_FORMAT, "pair": str(self.pair), "architecture": self.architecture.value,
                "mean_iou": self.mean_iou, "seed": self.seed, "digest": self.digest, "report": self.report}

    @classmethod
    def from_dict(cls, data: Mapping) -> "TransferCell":
        return cls(data["pair"], data["architecture"], float(data["mean_iou"]), data.get("report"),
                   data.get("seed"), data.get("digest"))


# ---------------------------------------------------------------------------
# Matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RowRanking:
    pair: Pair
    order: tuple[Architecture, ...]
    tied: bool
    # Each tie group lists architectures sharing one value, alphabetically.
    ties: tuple[tuple[Architecture, ...], ...] = ()

    @property
    def best(self) -> Architecture:
        return self.order[0]

    @property
    def second(self) -> Architecture:
        return self.order[1]


@dataclass
class TransferMatrix:
    cells: list[TransferCell]
    architectures: tuple[Architecture, ...] = TABLE_ORDER
    pairs: tuple[Pair, ...] = REFERENCE_PAIRS
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.architectures = tuple(Architecture.parse(a) for a in self.architectures)
        self.pairs = tuple(Pair.parse(p) for p in self.pairs)
        self._index = {}
        for c in self.cells:
            key = (c.pair, c.architecture)
            if key in self._index:
                raise ValueError(f"duplicate cell {c.cell_id}")
            self._index[key] = c
        self.cells = sorted(self.cells, key=lambda c: (self.pairs.index(c.pair) if c.pair in self.pairs else len(self.pairs),
                                                       str(c.pair), self._arch_pos(c.architecture)))

    def _arch_pos(self, arch: Architecture) -> int:
        return self.architectures.index(arch) if arch in self.architectures else len(self.architectures)

    @classmethod
    def from_values(cls, rows: Mapping, architectures: Sequence = TABLE_ORDER) -> "TransferMatrix":
        """Build from ``{pair: sequence-or-mapping of mean IoU}``."""
        archs = tuple(Architecture.parse(a) for a in architectures)
        cells, pairs = [], []
        for pair, values in rows.items():
            p = Pair.parse(pair)
            pairs.append(p)
            items = values.items() if isinstance(values, Mapping) else zip(archs, values)
            cells.extend(TransferCell(p, a, float(v)) for a, v in items)
        return cls(cells, archs, tuple(pairs))

    def get(self, pair, architecture) -> Optional[TransferCell]:
        return self._index.get((Pair.parse(pair), Architecture.parse(architecture)))

    def row(self, pair) -> dict[Architecture, float]:
        p = Pair.parse(pair)
        return {a: self._index[(p, a)].mean_iou for a in self.architectures if (p, a) in self._index}

    @property
    def complete(self) -> bool:
        return all((p, a) in self._index for p in self.pairs for a in self.architectures)

    @property
    def ranking(self) -> dict[Pair, RowRanking]:
        return {p: rank_row(self, p) for p in self.pairs if len(self.row(p)) == len(self.architectures)}

    def to_dict(self) -> dict:
        return {
            "format": MATRIX_FORMAT,
            "architectures": [a.value for a in self.architectures],
            "pairs": [str(p) for p in self.pairs],
            "cells": [c.to_dict() for c in self.cells],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TransferMatrix":
        if data.get("format") != MATRIX_FORMAT:
            raise ValueError(f"not a transfer matrix document (format={data.get('format')!r})")
        return cls([TransferCell.from_dict(c) for c in data["cells"]], tuple(data["architectures"]), tuple(data["pairs"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TransferMatrix":
        return cls.from_dict(json.loads(text))

    def to_csv(self, decimals: Optional[int] = None) -> str:
        """Rows are ordered pairs, columns architectures; blank for missing cells."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair"] + [SHORT_NAMES.get(a, a.value) for a in self.architectures])
        for p in self.pairs:
            row = self.row(p)
            w.writerow([str(p)] + [_fmt(row.get(a), decimals) for a in self.architectures])
        return buf.getvalue()


def _fmt(value: Optional[float], decimals: Optional[int]) -> str:
    if value is None:
        return ""
    return repr(float(value)) if decimals is None else f"{value:.{decimals}f}"


def rank_row(matrix, pair=None) -> RowRanking:
    """Architectures by mean IoU, highest first.

    ``matrix`` is a :class:`TransferMatrix` (with ``pair``) or a plain
    ``{architecture: value}`` mapping. Equal values are ordered
    alphabetically by architecture name and reported as ties.
    """
    if isinstance(matrix, TransferMatrix):
        p = Pair.parse(pair)
        row = matrix.row(p)
        missing = [a.value for a in matrix.architectures if a not in row]
        if missing:
            raise IncompleteRowError(f"row {p} is missing {', '.join(missing)}")
    else:
        p = Pair.parse(pair) if pair is not None else None
        row = {Architecture.parse(a): v for a, v in matrix.items()}
        if any(v is None for v in row.values()):
            raise IncompleteRowError(f"row {p} has missing values")
    if not row:
        raise IncompleteRowError(f"row {p} is empty")
    order = tuple(sorted(row, key=lambda a: (-row[a], a.value)))
    groups: dict[float, list[Architecture]] = {}
    for a in order:
        groups.setdefault(row[a], []).append(a)
    ties = tuple(tuple(g) for g in groups.values() if len(g) > 1)
    return RowRanking(p, order, bool(ties), ties)


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------


@dataclass
class GridConfig:
    base: RunConfig
    architectures: tuple = TABLE_ORDER
    pairs: tuple = REFERENCE_PAIRS
    jobs: int = 1

    def __post_init__(self):
        self.architectures = tuple(Architecture.parse(a) for a in self.architectures)
        self.pairs = tuple(Pair.parse(p) for p in self.pairs)
        if len(set(self.architectures)) != len(self.architectures):
            raise ValueError("duplicate architecture in grid")
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("duplicate pair in grid")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


def cell_seed(base_seed: int, pair: Pair, arch: Architecture) -> int:
    h = hashlib.sha256(f"{base_seed}|{pair}|{arch.value}".encode()).digest()
    return int.from_bytes(h[:4], "big") & 0x7FFFFFFF


def _manifest_fingerprint(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for r in sorted(manifest.records, key=lambda r: r.scan_id):
        h.update("|".join([r.scan_id, r.dataset_id.value, r.modality.value, r.image_ref, r.mask_ref or "",
                           r.split.value]).encode())
        h.update(b"\n")
    return h.hexdigest()


@dataclass(frozen=True)
class _CellJob:
    pair: Pair
    architecture: Architecture
    config: RunConfig
    train_manifest: DatasetManifest
    test_manifest: DatasetManifest
    digest: str

    @property
    def key(self) -> str:
        return f"{self.pair.train.value}-{self.pair.test.value}_{self.architecture.value}_{self.digest[:16]}"


def _plan(grid: GridConfig, manifest: DatasetManifest) -> list[_CellJob]:
    jobs = []
    for pair in grid.pairs:
        src = group(manifest, pair.train).filter(split="train")
        dst = group(manifest, pair.test).filter(split="test")
        if not src.records:
            raise MissingGroupError(f"group {pair.train.value} has no training scans (pair {pair})")
        if not dst.records:
            raise MissingGroupError(f"group {pair.test.value} has no test scans (pair {pair})")
        fp = hashlib.sha256((_manifest_fingerprint(src) + _manifest_fingerprint(dst)).encode()).hexdigest()
        for arch in grid.architectures:
            cfg = grid.base.replace(architecture=arch, seed=cell_seed(grid.base.seed, pair, arch), waive_audit=True)
            doc = json.dumps({"config": cfg.to_dict(), "data": fp, "pair": str(pair)}, sort_keys=True)
            jobs.append(_CellJob(pair, arch, cfg, src, dst, hashlib.sha256(doc.encode()).hexdigest()))
    return jobs


def _run_cell(job: _CellJob, threads: Optional[int] = None) -> dict:
    if threads is not None:
        import torch
        torch.set_num_threads(threads)
    state = train(job.config, job.train_manifest)
    acc = evaluate(state.model, job.test_manifest, split="test")
    report = build_report(acc, provenance=job.config.to_dict())
    cell = TransferCell(job.pair, job.architecture, report.mean_iou, report.to_dict(), job.config.seed, job.digest)
    return cell.to_dict()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_grid(grid: GridConfig, manifest: DatasetManifest, out_dir, *,
             on_cell_done: Optional[Callable[[TransferCell], None]] = None) -> TransferMatrix:
    """Run every (pair, architecture) cell not already on disk.

    Writes ``matrix.json`` and ``matrix.csv`` under ``out_dir`` once all
    cells are present. The audit of ``manifest`` must pass unless the base
    config waives it.
    """
    if not grid.base.waive_audit:
        report = audit_splits(manifest)
        if not report.passed:
            raise AuditFailedError("manifest does not match the dataset registry\n" + report.to_text())
    out_dir = Path(out_dir)
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    plan = _plan(grid, manifest)

    done: list[TransferCell] = []
    pending: list[_CellJob] = []
    for job in plan:
        path = cells_dir / job.key / "cell.json"
        if path.exists():
            done.append(TransferCell.from_dict(json.loads(path.read_text(encoding="utf-8"))))
        else:
            pending.append(job)

    def finish(job: _CellJob, data: dict) -> None:
        cell_dir = cells_dir / job.key
        cell_dir.mkdir(exist_ok=True)
        _write_atomic(cell_dir / "cell.json", json.dumps(data, indent=2, sort_keys=True) + "\n")
        cell = TransferCell.from_dict(data)
        done.append(cell)
        if on_cell_done is not None:
            on_cell_done(cell)

    if grid.jobs == 1 or len(pending) <= 1:
        for job in pending:
            try:
                data = _run_cell(job)
            except Exception as exc:
                raise CellError(f"{job.pair}/{job.architecture.value}", exc) from exc
            finish(job, data)
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=grid.jobs, mp_context=ctx) as pool:
            futures = [(job, pool.submit(_run_cell, job, 1)) for job in pending]
            for job, fut in futures:
                try:
                    data = fut.result()
                except Exception as exc:
                    raise CellError(f"{job.pair}/{job.architecture.value}", exc) from exc
                finish(job, data)

    matrix = TransferMatrix(done, grid.architectures, grid.pairs)
    _write_atomic(out_dir / "matrix.json", matrix.to_json())
    _write_atomic(out_dir / "matrix.csv", matrix.to_csv())
    return matrix


# ---------------------------------------------------------------------------
# False-positive experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FPReport:
    tn_rate: Optional[float]
    n_scans: int
    accumulator: ConfusionAccumulator
    architecture: Optional[str] = None

    @property
    def reference(self) -> dict[str, float]:
        return {a.value: v for a, v in TN_RATES.items()}

    def to_dict(self) -> dict:
        m = self.accumulator.matrix
        return {
            "architecture": self.architecture,
            "tn_rate": self.tn_rate,
            "n_scans": self.n_scans,
            "true_negatives": int(m[0, 0]),
            "false_positives": int(m[0, 1:].sum()),
            "reference": self.reference,
        }


def check_healthy(manifest: DatasetManifest) -> None:
    for r in manifest.records:
        if r.mask_ref is None:
            continue
        labels = load_mask(r).labels
        if np.any(labels != 0):
            raise NonHealthyScanError(f"scan {r.scan_id} has lesion labels; the false-positive experiment "
                                      "needs healthy scans only")


def fp_experiment(model, healthy_manifest: DatasetManifest, jobs: int = 1) -> FPReport:
    """Pooled true-negative rate of ``model`` over healthy scans (all splits)."""
    check_healthy(healthy_manifest)
    acc = evaluate(model, healthy_manifest, split=None, jobs=jobs)
    spec = getattr(model, "spec", None)
    arch = spec.architecture.value if spec is not None else None
    return FPReport(tn_rate(acc), len(healthy_manifest.records), acc, arch)
