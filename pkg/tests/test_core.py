import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionbench.core import (
    Architecture,
    ClassEntry,
    ClassMap,
    ClassScores,
    ConfigError,
    MaskImage,
    MetricReport,
    RunConfig,
    ScanRecord,
    default_class_map,
    validate_mask,
)


def test_default_class_map_layout():
    cmap = default_class_map()
    assert len(cmap) == 6
    assert [e.index for e in cmap] == [0, 1, 2, 3, 4, 5]
    assert cmap[0].name == "background" and cmap[0].color is None
    assert cmap[1].name == "IRF" and cmap[1].color == (255, 0, 0)
    assert cmap.names == ("background", "IRF", "SRF", "HE", "drusen", "CA")
    colors = {e.name: e.color for e in cmap}
    assert colors["HE"] == (0, 0, 255)
    assert colors["SRF"] == (255, 255, 0)
    assert colors["CA"] == (0, 255, 0)
    assert colors["drusen"] == (255, 105, 180)
    assert cmap.lesion_indices == (1, 2, 3, 4, 5)


def test_class_map_round_trip():
    cmap = default_class_map()
    text = cmap.dumps()
    again = ClassMap.loads(text)
    assert again == cmap
    assert again.dumps() == text


@pytest.mark.parametrize("mutate", [
    lambda es: es[:5],
    lambda es: es[:1] + (ClassEntry(1, "IRF", (0, 0, 255)),) + es[2:],
    lambda es: (ClassEntry(0, "background", (1, 2, 3)),) + es[1:],
    lambda es: es[:5] + (ClassEntry(7, "CA", (0, 255, 0)),),
    lambda es: es[:5] + (ClassEntry(5, "IRF", (255, 0, 0)),),
])
def test_class_map_rejects_broken_entries(mutate):
    with pytest.raises(ConfigError):
        ClassMap(mutate(default_class_map().entries))


def test_validate_mask_accepts_valid():
    assert validate_mask(MaskImage(np.arange(6, dtype=np.uint8).reshape(2, 3)), default_class_map()) == []


def test_validate_mask_reports_first_invalid_label():
    labels = np.zeros((4, 4), dtype=np.uint8)
    labels[2, 1] = 7
    labels[3, 3] = 9
    (v,) = validate_mask(MaskImage(labels), default_class_map())
    assert v.kind == "invalid-label"
    assert v.position == (2, 1)


def test_validate_mask_empty_dimensions():
    (v,) = validate_mask(MaskImage(np.zeros((0, 0), dtype=np.uint8)), default_class_map())
    assert v.kind == "empty-dimensions"


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_validate_mask_accepts_every_in_range_mask(h, w, seed):
    labels = np.random.default_rng(seed).integers(0, 6, size=(h, w), dtype=np.uint8)
    assert validate_mask(MaskImage(labels), default_class_map()) == []


def test_mask_image_is_read_only():
    m = MaskImage(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        m.labels[0, 0] = 1
    assert MaskImage.blank(3, 5).shape == (3, 5)


def test_scan_record_without_mask_is_healthy():
    r = ScanRecord("s1", "DukeI", "OCT", "a.png", "", "train")
    assert r.mask_ref is None and r.is_healthy
    assert not ScanRecord("s2", "Zhang", "OCT", "a.png", "m.png", "test").is_healthy


def test_runconfig_requires_multiple_of_32():
    with pytest.raises(ConfigError, match="32"):
        RunConfig("UNet", epochs=1, input_size=(100, 96))


def test_runconfig_reports_all_errors_at_once():
    with pytest.raises(ConfigError) as exc:
        RunConfig.from_dict({"architecture": "Nope", "epochs": -1, "input_size": [31, 64], "bogus": 1})
    text = " ".join(exc.value.errors)
    assert "bogus" in text
    assert "Nope" in text and "RAGNet" in text
    assert "epochs" in text
    assert "32" in text
    assert len(exc.value.errors) >= 4


def test_runconfig_missing_epochs():
    with pytest.raises(ConfigError, match="epochs"):
        RunConfig.from_dict({"architecture": "UNet"})


def test_runconfig_yaml_round_trip():
    cfg = RunConfig("PSPNet", epochs=3, input_size=(64, 96), seed=7, class_weights=(1, 2, 2, 2, 2, 2))
    again = RunConfig.loads(cfg.dumps())
    assert again == cfg
    assert again.architecture is Architecture.PSPNET


def test_architecture_parse_lists_valid_values():
    assert Architecture.parse("fcn8") is Architecture.FCN8
    with pytest.raises(ValueError, match="RAGNet, PSPNet, SegNet, UNet, FCN8, FCN32"):
        Architecture.parse("DeepLab")


def test_metric_report_lookup():
    per_class = {"IRF": ClassScores(0.5, 1 / 3)}
    r = MetricReport(per_class, 0.5, 1 / 3, 0.6, 0.7, 0.65)
    assert r.get("f1") == 0.65
    assert r.get("dice:IRF") == 0.5
    with pytest.raises(KeyError):
        r.get("dice:HE")
    assert MetricReport.from_dict(r.to_dict()) == r
