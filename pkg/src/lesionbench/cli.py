"""lesionbench command line.

Exit codes: 0 success, 1 validation failure, 2 runtime failure,
3 acceptance-threshold failure. Errors are printed to stderr as
``error[CODE]: message`` so scripts can match on CODE.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3
DATA_ROOT_ENV = "LESIONBENCH_DATA_ROOT"

log = logging.getLogger("lesionbench")


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _data_path(value, base: Optional[Path] = None) -> Path:
    """Resolve a data path: absolute, relative to ``base``, else relative to
    $LESIONBENCH_DATA_ROOT when set, else to the working directory."""
    p = Path(value)
    if p.is_absolute():
        return p
    if base is not None and (base / p).exists():
        return base / p
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.exists():
        return Path(root) / p
    return p


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("E_INPUT", f"{what} not found: {path}")
    return path


def _load_manifest(path):
    from .datasets import EmptyManifestError, ManifestError, load_manifest

    path = _require(_data_path(path), "manifest")
    try:
        manifest = load_manifest(path)
    except EmptyManifestError:
        raise CliError("E_EMPTY_MANIFEST", f"empty manifest: {path}") from None
    except ManifestError as exc:
        raise CliError("E_MANIFEST", str(exc)) from None
    if not manifest.records:
        raise CliError("E_EMPTY_MANIFEST", f"empty manifest: {path}")
    return manifest


def _load_checkpoint(path):
    from .engine import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(_require(Path(path), "checkpoint"))
    except CheckpointError as exc:
        raise CliError("E_CHECKPOINT", str(exc)) from None


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_audit(args) -> int:
    from .datasets import audit_splits

    report = audit_splits(_load_manifest(args.manifest))
    print(report.to_json() if args.json else report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    if not report.passed:
        print(f"error[E_AUDIT]: {len(report.failures())} dataset(s) deviate from the registry", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_synth(args) -> int:
    from .datasets import concat_manifests, synth_fixture, write_manifest

    out = Path(args.out)
    size = tuple(args.size)
    common = dict(size=size, healthy=args.healthy, dataset_id=args.dataset_id, margin=args.margin,
                  lesions_per_scan=args.lesions_per_scan)
    parts = [synth_fixture(out / "train", args.n_scans, seed=args.seed, split="train", prefix=f"{args.prefix}-tr", **common)]
    if args.test_scans:
        parts.append(synth_fixture(out / "test", args.test_scans, seed=args.seed + 1, split="test",
                                   prefix=f"{args.prefix}-te", **common))
    manifest = concat_manifests(parts)
    path = write_manifest(manifest.records, out / "manifest.txt", relative_to=out)
    print(f"wrote {len(manifest)} scans to {path}")
    return EXIT_OK


def _load_config(args):
    from .core import ConfigError, RunConfig

    path = _require(Path(args.config), "config")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise CliError("E_CONFIG", f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError("E_CONFIG", f"{path} must contain a mapping")
    # Flags are applied before validation so they can fill in missing fields.
    for name in ("architecture", "epochs", "seed", "batch_size", "train_manifest", "test_manifest", "upsample"):
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    if getattr(args, "input_size", None):
        raw["input_size"] = list(args.input_size)
    if getattr(args, "waive_audit", False):
        raw["waive_audit"] = True
    if getattr(args, "augment", False):
        raw["augment"] = True
    try:
        return RunConfig.from_dict(raw), path.parent
    except ConfigError as exc:
        raise CliError("E_CONFIG", "invalid configuration:\n  " + "\n  ".join(exc.errors)) from None


def cmd_train(args) -> int:
    from .engine import AuditFailedError, DivergenceError, EmptyManifestError, state_digest, train

    config, base = _load_config(args)
    if not config.train_manifest:
        raise CliError("E_CONFIG", "no train_manifest in config or on the command line")
    manifest_path = _data_path(config.train_manifest, base)
    manifest = _load_manifest(manifest_path)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.dumps(), encoding="utf-8")
    try:
        state = train(config, manifest, run_dir=run_dir)
    except AuditFailedError as exc:
        raise CliError("E_AUDIT", str(exc)) from None
    except EmptyManifestError as exc:
        raise CliError("E_EMPTY_MANIFEST", str(exc)) from None
    except DivergenceError as exc:
        raise CliError("E_DIVERGED", str(exc), EXIT_RUNTIME) from None
    digest = state_digest(state)
    (run_dir / "checkpoints" / "final.sha256").write_text(digest + "\n", encoding="utf-8")
    final = state.running_loss
    print(f"run directory: {run_dir}")
    print(f"epochs: {state.epoch}  final loss: {final if final is None else f'{final:.6f}'}")
    print(f"checkpoint digest: {digest}")
    return EXIT_OK


def _gate(value, minimum, name) -> int:
    if minimum is None:
        return EXIT_OK
    if value is None or value < minimum:
        print(f"error[E_THRESHOLD]: {name} {value} below required {minimum}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .engine import EmptyManifestError, evaluate
    from .metrics import build_report
    from .report import emit_tables

    state = _load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    split = None if args.split == "all" else args.split
    try:
        acc = evaluate(state.model, manifest, split=split, jobs=args.jobs)
    except EmptyManifestError as exc:
        raise CliError("E_EMPTY_MANIFEST", str(exc)) from None
    report = build_report(acc, provenance=state.config.to_dict(), with_tn_rate=args.tn_rate)
    out = Path(args.out)
    _write_json(out / "report.json", report.to_dict())
    emit_tables({state.config.architecture.value: report}, out, tn_reference=False)
    print(f"mean dice {_f(report.mean_dice)}  mean IoU {_f(report.mean_iou)}  "
          f"tpr {_f(report.micro_tpr)}  ppv {_f(report.micro_ppv)}  f1 {_f(report.micro_f1)}")
    return _gate(report.mean_dice, args.min_mean_dice, "mean dice")


def _f(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def cmd_transfer(args) -> int:
    from .core import ConfigError, RunConfig
    from .datasets import concat_manifests
    from .report import emit_tables
    from .transfer import CellError, GridConfig, MissingGroupError, run_grid

    path = _require(Path(args.grid), "grid config")
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict) or "base" not in doc or "manifest" not in doc:
        raise CliError("E_CONFIG", f"{path} needs 'base' (run config) and 'manifest' keys")
    try:
        base = RunConfig.from_dict(doc["base"])
    except ConfigError as exc:
        raise CliError("E_CONFIG", "invalid base configuration:\n  " + "\n  ".join(exc.errors)) from None
    kwargs = {k: doc[k] for k in ("architectures", "pairs") if k in doc}
    try:
        grid = GridConfig(base, jobs=args.jobs or int(doc.get("jobs", 1)), **kwargs)
    except ValueError as exc:
        raise CliError("E_CONFIG", str(exc)) from None
    refs = doc["manifest"] if isinstance(doc["manifest"], list) else [doc["manifest"]]
    manifest = concat_manifests([_load_manifest(_data_path(r, path.parent)) for r in refs])
    out = Path(args.out)
    try:
        matrix = run_grid(grid, manifest, out)
    except MissingGroupError as exc:
        raise CliError("E_GROUP", str(exc)) from None
    except CellError as exc:
        raise CliError("E_CELL", str(exc), EXIT_RUNTIME) from None
    emit_tables({}, out, matrix=matrix, tn_reference=False)
    print(matrix.to_csv(decimals=3), end="")
    return EXIT_OK


def cmd_fp(args) -> int:
    from .transfer import NonHealthyScanError, fp_experiment

    state = _load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    try:
        result = fp_experiment(state.model, manifest, jobs=args.jobs)
    except NonHealthyScanError as exc:
        raise CliError("E_NOT_HEALTHY", str(exc)) from None
    _write_json(Path(args.out) / "fp_report.json", result.to_dict())
    print(f"tn_rate {_f(result.tn_rate)} over {result.n_scans} scans")
    for arch, ref in sorted(result.reference.items()):
        print(f"  reference {arch}: {ref:.4f}")
    return _gate(result.tn_rate, args.min_tn_rate, "tn_rate")


def cmd_overlay(args) -> int:
    from .datasets import UnreadableImageError, load_image, save_mask
    from .engine import predict
    from .report import render_overlay

    state = _load_checkpoint(args.checkpoint)
    image_path = _require(_data_path(args.image), "image")
    try:
        mask = predict(state.model, image_path)
        image = load_image(image_path)
    except UnreadableImageError as exc:
        raise CliError("E_IMAGE", str(exc)) from None
    overlay = render_overlay(image, mask, alpha=args.alpha)
    out = Path(args.out)
    stem = f"{image_path.stem}_{state.config.architecture.value}"
    overlay.save(out / f"{stem}_overlay.png")
    save_mask(mask, out / f"{stem}_mask.png")
    print(f"wrote {out / f'{stem}_overlay.png'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .core import MetricReport
    from .report import emit_tables, plot_per_class, reference_reports
    from .transfer import TransferMatrix

    reports = {}
    if args.reference:
        reports.update(reference_reports())
    for item in args.reports or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise CliError("E_ARGS", f"--reports entries must be NAME=PATH, got {item!r}")
        data = json.loads(_require(Path(path), "report").read_text(encoding="utf-8"))
        reports[name] = MetricReport.from_dict(data)
    matrix = None
    if args.matrix:
        matrix = TransferMatrix.from_json(_require(Path(args.matrix), "matrix").read_text(encoding="utf-8"))
    if not reports and matrix is None:
        raise CliError("E_ARGS", "nothing to report; pass --reports, --matrix or --reference")
    out = Path(args.out)
    written = emit_tables(reports, out, matrix=matrix)
    if args.plot and reports:
        written["dice_per_class.png"] = plot_per_class(reports, out / "dice_per_class.png", "dice")
        written["iou_per_class.png"] = plot_per_class(reports, out / "iou_per_class.png", "iou")
    for name in sorted(written):
        print(written[name])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_config_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("overrides (take precedence over the config file)")
    g.add_argument("--architecture", help="RAGNet, PSPNet, SegNet, UNet, FCN8 or FCN32")
    g.add_argument("--epochs", type=int, help="number of training epochs")
    g.add_argument("--seed", type=int, help="random seed")
    g.add_argument("--batch-size", type=int, help="mini-batch size")
    g.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"), help="network input size")
    g.add_argument("--train-manifest", help="training manifest path")
    g.add_argument("--test-manifest", help="test manifest path")
    g.add_argument("--upsample", choices=["bilinear", "transposed"], help="decoder upsampling mode")
    g.add_argument("--augment", action="store_true", help="enable flip and shift augmentation")
    g.add_argument("--waive-audit", action="store_true", help="skip the registry audit (custom or synthetic data)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionbench",
        description="Retinal lesion segmentation benchmark toolkit.",
        epilog=f"Relative data paths fall back to ${DATA_ROOT_ENV} when set.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="check manifest split counts against the dataset registry")
    p.add_argument("manifest", help="manifest file")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.add_argument("--csv", metavar="PATH", help="also write the per-dataset table as CSV")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("synth", help="write a synthetic fixture with images, masks and a manifest")
    p.add_argument("out", help="output directory")
    p.add_argument("--n-scans", type=int, default=4, help="training scans (default 4)")
    p.add_argument("--test-scans", type=int, default=0, help="additional test scans (default 0)")
    p.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"), help="image size")
    p.add_argument("--seed", type=int, default=0, help="fixture seed")
    p.add_argument("--dataset-id", default="synthetic", help="dataset id stamped on every record")
    p.add_argument("--prefix", default="syn", help="scan id prefix")
    p.add_argument("--margin", type=int, default=2, help="max random inset of lesion rectangles")
    p.add_argument("--lesions-per-scan", type=int, default=2, help="lesions drawn per scan")
    p.add_argument("--healthy", action="store_true", help="lesion-free scans without masks")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("config", help="run config (YAML)")
    p.add_argument("--out", required=True, help="run directory")
    _add_config_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("manifest", help="manifest file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=["train", "test", "all"], default="test", help="records to score (default test)")
    p.add_argument("--jobs", type=int, default=1, help="parallel evaluation workers")
    p.add_argument("--tn-rate", action="store_true", help="include the background true-negative rate")
    p.add_argument("--min-mean-dice", type=float, help="exit 3 if mean lesion dice is lower")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("transfer", help="run the train-on-X / test-on-Y grid")
    p.add_argument("grid", help="grid config (YAML with base, manifest or list of manifests, architectures, pairs)")
    p.add_argument("--out", required=True, help="output directory; finished cells are reused")
    p.add_argument("--jobs", type=int, help="parallel cell workers")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("fp", help="true-negative rate on a healthy-only manifest")
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("manifest", help="healthy manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel evaluation workers")
    p.add_argument("--min-tn-rate", type=float, help="exit 3 if tn_rate is lower")
    p.set_defaults(func=cmd_fp)

    p = sub.add_parser("overlay", help="predict one scan and write a color overlay")
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("image", help="image file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=0.5, help="blend factor in [0, 1] (default 0.5)")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("report", help="emit result tables and plots")
    p.add_argument("--reports", nargs="*", metavar="NAME=PATH", help="report.json files from evaluate")
    p.add_argument("--matrix", help="matrix.json from transfer")
    p.add_argument("--reference", action="store_true", help="include the published reference scores")
    p.add_argument("--plot", action="store_true", help="also draw per-class bar charts")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"error[E_INVALID]: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        print(f"error[E_RUNTIME]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
