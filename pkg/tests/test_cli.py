import json

import pytest
import yaml

from conftest import TINY_BLOCKS, TINY_WIDTHS
from lesionbench.cli import EXIT_INVALID, EXIT_OK, EXIT_THRESHOLD, main

COMMANDS = ["audit", "synth", "train", "evaluate", "transfer", "fp", "overlay", "report"]


@pytest.mark.parametrize("command", COMMANDS)
def test_help(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
    assert "usage: lesionbench" in capsys.readouterr().out


def test_unknown_flag_fails(capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth", "x", "--no-such-flag"])
    assert info.value.code == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def write_config(path, manifest, **extra):
    cfg = dict(architecture="UNet", epochs=2, input_size=[64, 64], batch_size=4, seed=0,
               backbone_widths=list(TINY_WIDTHS), backbone_blocks=list(TINY_BLOCKS), waive_audit=True,
               train_manifest=str(manifest))
    cfg.update(extra)
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture
def trained(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "data"), "--n-scans", "4", "--test-scans", "2"]) == EXIT_OK
    manifest = tmp_path / "data" / "manifest.txt"
    cfg = write_config(tmp_path / "run.yaml", manifest)
    assert main(["train", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_OK
    capsys.readouterr()
    return tmp_path, manifest, tmp_path / "run" / "checkpoints" / "final.ckpt"


def test_train_writes_run_directory(trained):
    root, _, ckpt = trained
    run = root / "run"
    assert ckpt.exists() and (run / "config.yaml").exists()
    assert len((run / "logs" / "loss.jsonl").read_text().splitlines()) == 2
    assert len((run / "checkpoints" / "final.sha256").read_text().strip()) == 64


def test_train_flag_overrides_config(trained, capsys):
    root, manifest, _ = trained
    cfg = write_config(root / "c.yaml", manifest)
    assert main(["train", str(cfg), "--out", str(root / "r2"), "--epochs", "1", "--architecture", "fcn32"]) == EXIT_OK
    saved = yaml.safe_load((root / "r2" / "config.yaml").read_text())
    assert saved["epochs"] == 1 and saved["architecture"] == "FCN32"


def test_evaluate_and_threshold(trained, capsys):
    root, manifest, ckpt = trained
    assert main(["evaluate", str(ckpt), str(manifest), "--out", str(root / "ev")]) == EXIT_OK
    report = json.loads((root / "ev" / "report.json").read_text())
    assert "mean dice" in capsys.readouterr().out
    assert (root / "ev" / "dice_per_class.md").exists()
    code = main(["evaluate", str(ckpt), str(manifest), "--out", str(root / "ev2"), "--min-mean-dice", "1.01"])
    assert code == EXIT_THRESHOLD
    assert "error[E_THRESHOLD]" in capsys.readouterr().err
    assert report["mean_dice"] is None or 0 <= report["mean_dice"] <= 1


def test_overlay_and_report(trained, capsys):
    root, manifest, ckpt = trained
    image = next((root / "data" / "train").rglob("*.png"))
    assert main(["overlay", str(ckpt), str(image), "--out", str(root / "ov")]) == EXIT_OK
    assert any(p.name.endswith("_overlay.png") for p in (root / "ov").iterdir())
    main(["evaluate", str(ckpt), str(manifest), "--out", str(root / "ev")])
    code = main(["report", "--reference", "--reports", f"mine={root / 'ev' / 'report.json'}", "--plot",
                 "--out", str(root / "rep")])
    assert code == EXIT_OK
    md = (root / "rep" / "dice_per_class.md").read_text()
    assert "| mine |" in md and "| RAGNet |" in md
    assert (root / "rep" / "iou_per_class.png").exists()


def test_fp_rejects_lesioned_scans(trained, capsys):
    root, manifest, ckpt = trained
    assert main(["fp", str(ckpt), str(manifest), "--out", str(root / "fp")]) == EXIT_INVALID
    assert "error[E_NOT_HEALTHY]" in capsys.readouterr().err


def test_fp_on_healthy_scans(trained, capsys):
    root, _, ckpt = trained
    main(["synth", str(root / "healthy"), "--n-scans", "2", "--healthy"])
    assert main(["fp", str(ckpt), str(root / "healthy" / "manifest.txt"), "--out", str(root / "fp")]) == EXIT_OK
    data = json.loads((root / "fp" / "fp_report.json").read_text())
    assert 0.0 <= data["tn_rate"] <= 1.0 and data["n_scans"] == 2


def test_synthetic_manifest_fails_audit(trained, capsys):
    _, manifest, _ = trained
    assert main(["audit", str(manifest)]) == EXIT_INVALID
    assert "error[E_AUDIT]" in capsys.readouterr().err


def test_invalid_architecture_lists_choices(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", tmp_path / "m.txt", architecture="DeepLab")
    assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "error[E_CONFIG]" in err
    for name in ("RAGNet", "PSPNet", "SegNet", "UNet", "FCN8", "FCN32"):
        assert name in err


@pytest.mark.parametrize("argv, code", [
    (["evaluate", "missing.ckpt", "m.txt", "--out", "o"], "E_INPUT"),
    (["report", "--out", "o"], "E_ARGS"),
])
def test_error_codes(argv, code, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_INVALID
    assert f"error[{code}]" in capsys.readouterr().err


def test_empty_manifest_and_bad_checkpoint(tmp_path, capsys):
    (tmp_path / "empty.txt").write_text("# nothing here\n")
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    assert main(["audit", str(tmp_path / "empty.txt")]) == EXIT_INVALID
    assert "error[E_EMPTY_MANIFEST]" in capsys.readouterr().err
    assert main(["evaluate", str(tmp_path / "bad.ckpt"), str(tmp_path / "empty.txt"), "--out", str(tmp_path)]) == EXIT_INVALID
    assert "error[E_CHECKPOINT]" in capsys.readouterr().err


def test_transfer_command(tmp_path, capsys):
    from conftest import two_group_manifest
    from lesionbench.datasets import write_manifest

    m = two_group_manifest(tmp_path / "data")
    write_manifest(m.records, tmp_path / "all.txt", relative_to=tmp_path)
    base = yaml.safe_load(write_config(tmp_path / "b.yaml", "unused", epochs=1).read_text())
    base.pop("train_manifest")
    grid = {"base": base, "manifest": "all.txt", "architectures": ["FCN32"], "pairs": ["D->Z", "Z->D"]}
    (tmp_path / "grid.yaml").write_text(yaml.safe_dump(grid))
    assert main(["transfer", str(tmp_path / "grid.yaml"), "--out", str(tmp_path / "t")]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "pair,F-32" and len(out.splitlines()) == 3
    assert (tmp_path / "t" / "transfer_mean_iou.md").exists()
