import json

import numpy as np
import pytest

from lesionbench.core import MaskImage
from lesionbench.metrics import ConfusionAccumulator, accumulate, build_report, mean_over_lesions
from lesionbench.published import CLASS_COLUMNS, DICE, DICE_MEANS, IOU_MEANS, TABLE_ORDER, TRANSFER
from lesionbench.report import (
    MissingMetricError,
    Table,
    compare,
    dice_table,
    emit_tables,
    iou_table,
    labels_from_overlay,
    plot_per_class,
    reference_reports,
    render_overlay,
)
from lesionbench.transfer import REFERENCE_PAIRS, TransferMatrix


def random_mask(shape=(12, 10), seed=0):
    return MaskImage(np.random.default_rng(seed).integers(0, 6, shape).astype(np.uint8))


def random_image(shape=(12, 10), seed=1):
    return np.random.default_rng(seed).integers(0, 256, shape + (3,)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------


def test_alpha_zero_is_identity():
    img = random_image()
    assert np.array_equal(render_overlay(img, random_mask(), alpha=0.0).pixels, img)
    f = img.astype(np.float32) / 255
    assert np.array_equal(render_overlay(f, random_mask(), alpha=0.0).pixels, f)


def test_alpha_one_paints_pure_class_colors():
    img = random_image()
    mask = random_mask()
    out = render_overlay(img, mask, alpha=1.0).pixels
    irf = mask.labels == 1
    assert irf.any() and np.all(out[irf] == [255, 0, 0])
    bg = mask.labels == 0
    assert np.array_equal(out[bg], img[bg])
    assert np.array_equal(labels_from_overlay(out).labels[~bg], mask.labels[~bg])


def test_alpha_one_on_black_round_trips():
    mask = random_mask(seed=4)
    out = render_overlay(np.zeros((12, 10, 3), np.uint8), mask, alpha=1.0).pixels
    assert labels_from_overlay(out) == mask


def test_all_background_mask_changes_nothing():
    img = random_image()
    out = render_overlay(img, MaskImage.blank(12, 10), alpha=0.7)
    assert np.array_equal(out.pixels, img) and out.pixels.dtype == np.uint8


def test_half_blend_value():
    img = np.full((1, 1, 3), 100, np.uint8)
    out = render_overlay(img, MaskImage(np.array([[1]], np.uint8)), alpha=0.5).pixels
    assert out[0, 0].tolist() == [178, 50, 50]


def test_overlay_input_errors(tmp_path):
    with pytest.raises(ValueError, match="differ"):
        render_overlay(random_image((5, 5)), random_mask((5, 6)))
    with pytest.raises(ValueError):
        render_overlay(random_image(), random_mask(), alpha=1.5)
    path = render_overlay(random_image(), random_mask()).save(tmp_path / "o.png")
    assert path.stat().st_size > 0


# ---------------------------------------------------------------------------
# Comparisons
# ---------------------------------------------------------------------------


def test_compare_reproduces_reference_leads():
    refs = reference_reports()
    c = compare(refs["RAGNet"], refs["PSPNet"], "f1", ("RAGNet", "PSPNet"))
    assert c.text == "RAGNet leads PSPNet by 3.37% on f1"
    c = compare(refs["RAGNet"], refs["UNet"], "tpr", ("RAGNet", "UNet"))
    assert round(c.relative * 100, 2) == pytest.approx(9.49)


def test_compare_is_antisymmetric():
    refs = reference_reports()
    ab = compare(refs["SegNet"], refs["PSPNet"], "ppv")
    ba = compare(refs["PSPNet"], refs["SegNet"], "ppv")
    assert ab.delta == -ba.delta and ab.relative == ba.relative


def test_compare_identical_reports():
    r = reference_reports()["UNet"]
    c = compare(r, r, "mean_dice")
    assert c.delta == 0.0 and c.relative == 0.0 and "matches" in c.text


def test_compare_missing_metric():
    r = reference_reports()["UNet"]
    with pytest.raises(MissingMetricError):
        compare(r, r, "accuracy")
    with pytest.raises(MissingMetricError):
        compare({"f1": None}, {"f1": 0.3}, "f1")


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def test_mean_column_is_recomputed():
    table = dice_table(reference_reports())
    for name, values in table.rows:
        arch = next(a for a in TABLE_ORDER if a.value == name)
        assert values[-1] == mean_over_lesions(dict(zip(CLASS_COLUMNS, values[:-1])))
        assert values[-1] == pytest.approx(DICE_MEANS[arch], abs=1e-3)
        assert values[:-1] == [DICE[arch][c] for c in CLASS_COLUMNS]
    for name, values in iou_table(reference_reports()).rows:
        arch = next(a for a in TABLE_ORDER if a.value == name)
        assert values[-1] == pytest.approx(IOU_MEANS[arch], abs=1e-3)


def test_marks_bold_best_and_italic_second():
    t = Table("t", ["x"], [("a", [0.5]), ("b", [0.9]), ("c", [0.7]), ("d", [0.9])], decimals=3)
    md = t.to_markdown()
    assert "| b | **0.900** |" in md and "| d | **0.900** |" in md
    assert "| c | _0.700_ |" in md and "| a | 0.500 |" in md


def test_emit_tables_is_byte_deterministic(tmp_path):
    matrix = TransferMatrix.from_values({p: TRANSFER[(p.train.value, p.test.value)] for p in REFERENCE_PAIRS})
    a = emit_tables(reference_reports(), tmp_path / "a", matrix)
    b = emit_tables(reference_reports(), tmp_path / "b", matrix)
    assert sorted(a) == sorted(b)
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes(), name
    doc = json.loads((tmp_path / "a" / "tables.json").read_text())
    assert doc["tn_rate_reference"]["RAGNet"] == 0.9999
    assert "transfer_mean_iou.md" in a


def test_single_model_tables(tmp_path):
    gt = np.array([[0, 1], [2, 3]], np.uint8)
    report = build_report(accumulate(ConfusionAccumulator.zero(), gt, gt))
    written = emit_tables({"only": report}, tmp_path)
    md = written["dice_per_class.md"].read_text()
    assert "| only |" in md and "**" not in md  # nothing to rank against
    assert "n/a" in md  # classes absent from both masks


def test_plots_written(tmp_path):
    refs = reference_reports()
    for metric in ("dice", "iou"):
        path = plot_per_class(refs, tmp_path / f"{metric}.png", metric)
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(ValueError):
        plot_per_class(refs, tmp_path / "x.png", "f1")
