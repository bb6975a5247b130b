"""Result tables, comparison summaries, color overlays and bar plots."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .core import ClassMap, ClassScores, MaskImage, MetricReport, default_class_map
from .metrics import mean_over_lesions, relative_improvement
from .published import CLASS_COLUMNS, DICE, IOU, PIXEL_SCORES, SHORT_NAMES, TN_RATES
from .transfer import TransferMatrix


class MissingMetricError(KeyError):
    pass


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OverlayImage:
    base: np.ndarray
    labels: np.ndarray
    alpha: float
    pixels: np.ndarray

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = self.pixels
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(path)
        return path


def render_overlay(image, mask, cmap: Optional[ClassMap] = None, alpha: float = 0.5) -> OverlayImage:
    """Blend class colors over lesion pixels; background pixels are untouched.

    ``image`` is H x W x 3, either uint8 or float in [0, 1] (or H x W
    grayscale). The output keeps the input's dtype.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    cmap = cmap or default_class_map()
    base = np.asarray(image)
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    labels = mask.labels if isinstance(mask, MaskImage) else np.asarray(mask)
    if base.shape[:2] != labels.shape:
        raise ValueError(f"image {base.shape[:2]} and mask {labels.shape} differ in size")
    table = np.asarray(cmap.color_table(), dtype=np.float64)  # (6, 3), background row unused
    lesion = labels != 0
    out = base.copy()
    if base.dtype == np.uint8:
        colors = table[labels[lesion]]
        blend = (1 - alpha) * base[lesion].astype(np.float64) + alpha * colors
        out[lesion] = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
    else:
        colors = table[labels[lesion]] / 255.0
        out[lesion] = ((1 - alpha) * base[lesion] + alpha * colors).astype(base.dtype)
    return OverlayImage(base, labels, alpha, out)


def labels_from_overlay(pixels, cmap: Optional[ClassMap] = None) -> MaskImage:
    """Recover labels from pure class colors (an alpha = 1 overlay); anything
    else is background."""
    cmap = cmap or default_class_map()
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    labels = np.zeros(arr.shape[:2], dtype=np.uint8)
    for entry in cmap:
        if entry.color is None:
            continue
        labels[np.all(arr == np.asarray(entry.color, dtype=np.uint8), axis=-1)] = entry.index
    return MaskImage(labels)


# ---------------------------------------------------------------------------
# Comparisons
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Comparison:
    metric: str
    a: float
    b: float
    delta: float
    relative: float
    text: str


def _metric(report, metric: str) -> float:
    try:
        value = report.get(metric) if isinstance(report, MetricReport) else report[metric]
    except KeyError:
        raise MissingMetricError(f"report has no metric {metric!r}") from None
    if value is None:
        raise MissingMetricError(f"metric {metric!r} is undefined in report")
    return float(value)


def compare(report_a, report_b, metric: str, names: Sequence[str] = ("a", "b")) -> Comparison:
    """Absolute delta ``a - b`` and the relative lead of the higher value.

    The lead is (hi - lo) / hi, phrased "<leader> leads <other> by X.XX%".
    """
    a, b = _metric(report_a, metric), _metric(report_b, metric)
    delta = a - b
    if delta == 0:
        return Comparison(metric, a, b, 0.0, 0.0, f"{names[0]} matches {names[1]} on {metric} (0.00%)")
    (hi, hi_name), (lo, lo_name) = sorted([(a, names[0]), (b, names[1])], reverse=True)
    rel = relative_improvement(hi, lo)
    return Comparison(metric, a, b, delta, rel, f"{hi_name} leads {lo_name} by {rel * 100:.2f}% on {metric}")


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[tuple[str, list[Optional[float]]]]
    decimals: int
    # "column": best/second per column; "row": per row.
    mark: str = "column"

    def marks(self) -> dict[tuple[int, int], str]:
        """Cell -> "best" / "second"; ties share a mark."""
        out = {}
        if self.mark == "column":
            lines = [[(r, c) for r in range(len(self.rows))] for c in range(len(self.columns))]
        else:
            lines = [[(r, c) for c in range(len(self.columns))] for r in range(len(self.rows))]
        for cells in lines:
            vals = {cell: self.rows[cell[0]][1][cell[1]] for cell in cells}
            distinct = sorted({round(v, self.decimals) for v in vals.values() if v is not None}, reverse=True)
            if len(cells) < 2 or not distinct:
                continue
            for cell, v in vals.items():
                if v is None:
                    continue
                rv = round(v, self.decimals)
                if rv == distinct[0]:
                    out[cell] = "best"
                elif len(distinct) > 1 and rv == distinct[1]:
                    out[cell] = "second"
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + self.columns)
        for name, vals in self.rows:
            w.writerow([name] + ["" if v is None else f"{v:.{self.decimals}f}" for v in vals])
        return buf.getvalue()

    def to_markdown(self) -> str:
        marks = self.marks()
        lines = ["| model | " + " | ".join(self.columns) + " |", "|---" * (len(self.columns) + 1) + "|"]
        for r, (name, vals) in enumerate(self.rows):
            cells = []
            for c, v in enumerate(vals):
                s = "n/a" if v is None else f"{v:.{self.decimals}f}"
                m = marks.get((r, c))
                cells.append(f"**{s}**" if m == "best" else f"_{s}_" if m == "second" else s)
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        lines.append("")
        lines.append("Bold: best; italic: second best" + (" per row." if self.mark == "row" else " per column."))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"name": self.name, "columns": self.columns,
                "rows": [{"model": n, "values": v} for n, v in self.rows]}


def pixel_table(reports: Mapping[str, MetricReport]) -> Table:
    rows = [(name, [r.micro_tpr, r.micro_ppv, r.micro_f1]) for name, r in reports.items()]
    return Table("pixel_scores", ["tpr", "ppv", "f1"], rows, decimals=4)


def _class_table(reports: Mapping[str, MetricReport], kind: str) -> Table:
    rows = []
    for name, r in reports.items():
        vals = [getattr(r.per_class[c], kind) if c in r.per_class else None for c in CLASS_COLUMNS]
        rows.append((name, vals + [r.mean_dice if kind == "dice" else r.mean_iou]))
    return Table(f"{kind}_per_class", list(CLASS_COLUMNS) + ["mean"], rows, decimals=3)


def dice_table(reports: Mapping[str, MetricReport]) -> Table:
    return _class_table(reports, "dice")


def iou_table(reports: Mapping[str, MetricReport]) -> Table:
    return _class_table(reports, "iou")


def transfer_table(matrix: TransferMatrix) -> Table:
    rows = [(str(p), [matrix.row(p).get(a) for a in matrix.architectures]) for p in matrix.pairs]
    return Table("transfer_mean_iou", [SHORT_NAMES.get(a, a.value) for a in matrix.architectures], rows,
                 decimals=3, mark="row")


def emit_tables(reports: Mapping[str, MetricReport], out_dir, matrix: Optional[TransferMatrix] = None,
                tn_reference: bool = True) -> dict[str, Path]:
    """Write CSV and marked markdown per table, plus ``tables.json`` with full precision.

    Output is byte-identical for identical inputs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = []
    if reports:
        tables += [pixel_table(reports), dice_table(reports), iou_table(reports)]
    if matrix is not None:
        tables.append(transfer_table(matrix))
    written = {}
    for t in tables:
        for ext, text in (("csv", t.to_csv()), ("md", t.to_markdown())):
            path = out_dir / f"{t.name}.{ext}"
            path.write_text(text, encoding="utf-8")
            written[f"{t.name}.{ext}"] = path
    doc = {
        "reports": {name: r.to_dict() for name, r in reports.items()},
        "tables": [t.to_dict() for t in tables],
    }
    if matrix is not None:
        doc["transfer"] = matrix.to_dict()
    if tn_reference:
        doc["tn_rate_reference"] = {a.value: v for a, v in TN_RATES.items()}
    path = out_dir / "tables.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written["tables.json"] = path
    return written


# ---------------------------------------------------------------------------
# Reference reports
# ---------------------------------------------------------------------------


def reference_reports() -> dict[str, MetricReport]:
    """Published per-model scores as reports; means recomputed from the per-class cells."""
    out = {}
    for arch, px in PIXEL_SCORES.items():
        per_class = {c: ClassScores(DICE[arch][c], IOU[arch][c]) for c in CLASS_COLUMNS}
        out[arch.value] = MetricReport(
            per_class=per_class,
            mean_dice=mean_over_lesions({c: s.dice for c, s in per_class.items()}),
            mean_iou=mean_over_lesions({c: s.iou for c, s in per_class.items()}),
            micro_tpr=px["tpr"],
            micro_ppv=px["ppv"],
            micro_f1=px["f1"],
            tn_rate=TN_RATES.get(arch),
            provenance={"source": "published"},
            aggregation="published per-class scores",
        )
    return out


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def plot_per_class(reports: Mapping[str, MetricReport], path, metric: str = "dice") -> Path:
    """Grouped bar chart of per-class ``dice`` or ``iou`` across models."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if metric not in ("dice", "iou"):
        raise ValueError(f"metric must be 'dice' or 'iou', got {metric!r}")
    names = list(reports)
    x = np.arange(len(CLASS_COLUMNS))
    width = 0.8 / max(1, len(names))
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, name in enumerate(names):
        vals = [getattr(reports[name].per_class[c], metric) or 0.0 for c in CLASS_COLUMNS]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(CLASS_COLUMNS)
    ax.set_ylim(0, 1)
    ax.set_ylabel(metric)
    ax.legend(fontsize="small", ncol=min(3, len(names)))
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
