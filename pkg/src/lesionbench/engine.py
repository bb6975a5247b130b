"""Training, inference, checkpoints and numerical gradient checks."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import MaskImage, RunConfig, ScanRecord, Split
from .datasets import DatasetManifest, EmptyManifestError, audit_splits, image_size, load_image, load_mask, resize_labels
from .metrics import ConfusionAccumulator, accumulate
from .models import ModelSpec, SegmentationModel, build, load_backbone_weights

log = logging.getLogger(__name__)

RHO = 0.95
EPS = 1e-6
LR = 1.0

CHECKPOINT_FORMAT = "lesionbench.checkpoint"
CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class AuditFailedError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ADADELTA
# ---------------------------------------------------------------------------


@dataclass
class AdadeltaState:
    square_avg: list[torch.Tensor]
    acc_delta: list[torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdadeltaState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adadelta_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdadeltaState,
                  rho: float = RHO, eps: float = EPS, lr: float = LR):
    """One ADADELTA update; returns ``(new_params, new_state)``.

    E[g^2] <- rho E[g^2] + (1 - rho) g^2
    dx     <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2

    Inputs are not modified.
    """
    if not (len(params) == len(grads) == len(state.square_avg) == len(state.acc_delta)):
        raise ValueError("params, grads and state must have the same length")
    new_params, new_sq, new_acc = [], [], []
    for p, g, sq, acc in zip(params, grads, state.square_avg, state.acc_delta):
        if p.shape != g.shape:
            raise ValueError(f"parameter {tuple(p.shape)} and gradient {tuple(g.shape)} differ in shape")
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError("gradient contains NaN or Inf")
        sq = sq * rho + (1 - rho) * g * g
        delta = torch.sqrt(acc + eps) / torch.sqrt(sq + eps) * g
        acc = acc * rho + (1 - rho) * delta * delta
        new_params.append(p - lr * delta)
        new_sq.append(sq)
        new_acc.append(acc)
    return new_params, AdadeltaState(new_sq, new_acc, state.step + 1)


class Adadelta(torch.optim.Optimizer):
    """torch optimizer front-end for :func:`adadelta_step`."""

    def __init__(self, params, lr: float = LR, rho: float = RHO, eps: float = EPS):
        super().__init__(params, dict(lr=lr, rho=rho, eps=eps))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            params = [p for p in group["params"] if p.grad is not None]
            if not params:
                continue
            for p in params:
                st = self.state[p]
                if not st:
                    st["square_avg"] = torch.zeros_like(p)
                    st["acc_delta"] = torch.zeros_like(p)
                    st["step"] = 0
            prev = AdadeltaState([self.state[p]["square_avg"] for p in params],
                                 [self.state[p]["acc_delta"] for p in params])
            new_params, new = adadelta_step(params, [p.grad for p in params], prev,
                                            rho=group["rho"], eps=group["eps"], lr=group["lr"])
            for p, np_, sq, acc in zip(params, new_params, new.square_avg, new.acc_delta):
                p.copy_(np_)
                st = self.state[p]
                st["square_avg"], st["acc_delta"] = sq, acc
                st["step"] += 1
        return loss


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def load_pair(record: ScanRecord, size: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    image = load_image(record.image_ref, size)
    labels = load_mask(record, size).labels
    return image, labels


def _augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator, max_shift: int = 4):
    if rng.random() < 0.5:
        image, labels = image[:, ::-1], labels[:, ::-1]
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    image = _shift(image, dy, dx, 0.0)
    labels = _shift(labels, dy, dx, 0)
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def _shift(arr: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    out = np.full_like(arr, fill)
    h, w = arr.shape[:2]
    src = arr[max(0, -dy): h - max(0, dy), max(0, -dx): w - max(0, dx)]
    out[max(0, dy): max(0, dy) + src.shape[0], max(0, dx): max(0, dx) + src.shape[1]] = src
    return out


def iter_batches(records: Sequence[ScanRecord], config: RunConfig, epoch: int):
    """Deterministic shuffled mini-batches for one epoch.

    Order depends only on (seed, epoch), so a resumed run sees the same
    batches as an uninterrupted one. Fundus and OCT records share batches.
    """
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(records))
    for start in range(0, len(order), config.batch_size):
        images, labels = [], []
        for i in order[start: start + config.batch_size]:
            image, lab = load_pair(records[int(i)], config.input_size)
            if config.augment:
                image, lab = _augment(image, lab, rng)
            images.append(image)
            labels.append(lab.astype(np.int64))
        x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
        y = torch.from_numpy(np.stack(labels))
        yield x, y


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: SegmentationModel
    optimizer: Adadelta
    config: RunConfig
    epoch: int = 0
    loss_curve: list[float] = field(default_factory=list)

    @property
    def running_loss(self) -> Optional[float]:
        return self.loss_curve[-1] if self.loss_curve else None

    @property
    def spec(self) -> ModelSpec:
        return self.model.spec


def init_state(config: RunConfig) -> TrainState:
    model = build(ModelSpec.from_config(config), seed=config.seed)
    if config.pretrained:
        load_backbone_weights(model, config.pretrained)
    return TrainState(model, Adadelta(model.parameters()), config)


def train(config: RunConfig, manifest: DatasetManifest, *, state: Optional[TrainState] = None,
          run_dir=None, on_epoch: Optional[Callable[[TrainState], None]] = None,
          refresh_bn: bool = True) -> TrainState:
    """Mini-batch training on the manifest's train split.

    Runs from ``state.epoch`` (0 for a fresh state) up to ``config.epochs``.
    Unless ``refresh_bn`` is False, batch-norm running statistics are
    re-estimated on the training data once the final epoch finishes.
    With ``run_dir`` the per-epoch loss is appended to ``logs/loss.jsonl``
    and the final state written to ``checkpoints/final.ckpt``.
    """
    if not config.waive_audit:
        report = audit_splits(manifest)
        if not report.passed:
            raise AuditFailedError("manifest does not match the dataset registry; set waive_audit for custom data\n"
                                   + report.to_text())
    records = manifest.filter(split=Split.TRAIN).records
    if not records:
        raise EmptyManifestError("manifest has no training records")
    state = state or init_state(config)
    state.config = config
    weights = torch.tensor(config.class_weights, dtype=torch.float32) if config.class_weights else None
    log_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "logs" / "loss.jsonl"
        if state.epoch == 0:
            log_path.write_text("", encoding="utf-8")

    model, opt = state.model, state.optimizer
    start = state.epoch
    while state.epoch < config.epochs:
        model.train()
        total, n = 0.0, 0
        for step, (x, y) in enumerate(iter_batches(records, config, state.epoch)):
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(x), y, weight=weights)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {state.epoch}, step {step}")
            loss.backward()
            opt.step()
            total += loss.item() * x.shape[0]
            n += x.shape[0]
        state.epoch += 1
        state.loss_curve.append(total / n)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"epoch": state.epoch, "loss": state.loss_curve[-1]}) + "\n")
        if on_epoch is not None:
            on_epoch(state)
    if refresh_bn and state.epoch > start:
        refresh_batchnorm(model, iter_batches(records, config, state.epoch - 1))
    if run_dir is not None:
        save_checkpoint(state, run_dir / "checkpoints" / "final.ckpt")
    return state


def refresh_batchnorm(model: torch.nn.Module, batches: Iterable[tuple[torch.Tensor, torch.Tensor]]) -> None:
    """Replace batch-norm running statistics with exact averages over ``batches``.

    The exponential running average lags behind fast-moving weights, which
    makes eval-mode predictions disagree with what training optimised.
    """
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    was_training = model.training
    model.train()
    try:
        with torch.no_grad():
            for x, _ in batches:
                model(x)
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        model.train(was_training)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _model_input_size(model, default: Sequence[int]) -> tuple[int, int]:
    spec = getattr(model, "spec", None)
    return tuple(spec.input_size) if spec is not None else tuple(default)


def predict(model: torch.nn.Module, scan) -> MaskImage:
    """Label mask for one scan at the scan's original resolution.

    ``scan`` is a :class:`ScanRecord`, an image path, or an H x W x 3 float
    array in [0, 1].
    """
    if isinstance(scan, ScanRecord):
        scan = scan.image_ref
    if isinstance(scan, (str, Path)):
        orig = image_size(scan)
        size = _model_input_size(model, orig)
        image = load_image(scan, size)
    else:
        image = np.asarray(scan, dtype=np.float32)
        orig = image.shape[:2]
        size = _model_input_size(model, orig)
        if tuple(orig) != tuple(size):
            t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
            image = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
            labels = model(x)[0].argmax(dim=0).numpy().astype(np.uint8)
    finally:
        model.train(was_training)
    return MaskImage(resize_labels(labels, orig))


def evaluate(model: torch.nn.Module, manifest: DatasetManifest, split: Optional[str] = "test",
             jobs: int = 1) -> ConfusionAccumulator:
    """Pooled confusion over every scan of ``split`` (all scans if None)."""
    records = manifest.filter(split=split).records if split else manifest.records
    if not records:
        raise EmptyManifestError(f"no records in split {split!r}")

    def run(chunk: Iterable[ScanRecord]) -> ConfusionAccumulator:
        acc = ConfusionAccumulator.zero()
        for r in chunk:
            pred = predict(model, r)
            acc = accumulate(acc, load_mask(r, (pred.height, pred.width)), pred)
        return acc

    model.eval()
    if jobs <= 1:
        return run(records)
    chunks = [records[i::jobs] for i in range(jobs)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(run, chunks))
    total = ConfusionAccumulator.zero()
    for p in parts:
        total = total.merge(p)
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_spec": state.model.spec.to_dict(),
        "run_config": state.config.to_dict(),
        "epoch": state.epoch,
        "loss_curve": list(state.loss_curve),
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_spec: Optional[ModelSpec] = None) -> TrainState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a lesionbench checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    spec = ModelSpec.from_dict(payload["model_spec"])
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"checkpoint spec {spec} does not match expected {expected_spec}")
    config = RunConfig.from_dict(payload["run_config"])
    if ModelSpec.from_config(config) != spec:
        raise CheckpointError("checkpoint run config and model spec disagree")
    model = build(spec, seed=config.seed)
    try:
        model.load_state_dict(payload["model_state"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"parameters do not match the stored spec: {exc}") from exc
    opt = Adadelta(model.parameters())
    opt.load_state_dict(payload["optimizer_state"])
    return TrainState(model, opt, config, int(payload["epoch"]), list(payload["loss_curve"]))


def state_digest(state: TrainState) -> str:
    """sha256 over spec, epoch, parameters and optimizer accumulators."""
    h = hashlib.sha256()
    h.update(json.dumps(state.model.spec.to_dict(), sort_keys=True).encode())
    h.update(str(state.epoch).encode())
    for name, t in sorted(state.model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    for p in state.model.parameters():
        st = state.optimizer.state.get(p, {})
        for key in ("square_avg", "acc_delta"):
            if key in st:
                h.update(st[key].contiguous().numpy().tobytes())
    return h.hexdigest()


def checkpoint_digest(path) -> str:
    return state_digest(load_checkpoint(path))


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradcheckResult:
    max_error: float
    checked: int
    skipped: int


class _PatternProbe:
    """Records ReLU on/off patterns and max-pool argmax indices of a forward pass."""

    def __init__(self, modules: Iterable[torch.nn.Module]):
        self.trace: list[torch.Tensor] = []
        self.handles = []
        for m in modules:
            if isinstance(m, torch.nn.ReLU):
                self.handles.append(m.register_forward_hook(lambda _m, _i, out: self.trace.append(out > 0)))
            elif isinstance(m, torch.nn.MaxPool2d):
                self.handles.append(m.register_forward_hook(self._pool_hook))

    def _pool_hook(self, m, inputs, out):
        if isinstance(out, tuple):
            self.trace.append(out[1].clone())
        else:
            _, idx = F.max_pool2d(inputs[0], m.kernel_size, m.stride, m.padding, m.dilation, m.ceil_mode, True)
            self.trace.append(idx)

    def take(self) -> list[torch.Tensor]:
        out, self.trace = self.trace, []
        return out

    def close(self) -> None:
        for h in self.handles:
            h.remove()


def _same(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradcheck_details(fragment: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], *,
                      params: Iterable[torch.Tensor] = (), modules: Optional[torch.nn.Module] = None,
                      step: float = 1e-3, seed: int = 0, floor: float = 1e-6) -> GradcheckResult:
    """Compare autograd against central differences element by element.

    The scalar probed is ``sum(fragment(*inputs) * w)`` for a fixed random
    ``w``. Inputs are cast to float64; ``params`` must already be float64 and
    are perturbed in place and restored. Relative error per element is
    |a - n| / max(|a|, |n|, floor).

    When ``modules`` is given, elements whose +/- step flips a ReLU or changes
    a max-pool argmax inside it are skipped: the function is not
    differentiable across such a kink and the finite difference is meaningless.
    """
    xs = [x.detach().double().clone().requires_grad_(True) for x in inputs]
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("gradcheck params must be float64; call module.double() first")
    targets = xs + params
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out_shape = fragment(*xs).shape
    w = torch.randn(out_shape, generator=gen, dtype=torch.float64)
    probe = _PatternProbe(modules.modules()) if modules is not None else None

    def scalar() -> torch.Tensor:
        return (fragment(*xs) * w).sum()

    try:
        analytic = torch.autograd.grad(scalar(), targets, allow_unused=True)
        base = probe.take() if probe else None
        worst, checked, skipped = 0.0, 0, 0
        with torch.no_grad():
            for t, a in zip(targets, analytic):
                a = torch.zeros_like(t) if a is None else a
                flat, aflat = t.view(-1), a.reshape(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + step
                    fp = scalar().item()
                    plus = probe.take() if probe else None
                    flat[i] = orig - step
                    fm = scalar().item()
                    minus = probe.take() if probe else None
                    flat[i] = orig
                    if probe and not (_same(base, plus) and _same(base, minus)):
                        skipped += 1
                        continue
                    num = (fp - fm) / (2 * step)
                    an = aflat[i].item()
                    worst = max(worst, abs(an - num) / max(abs(an), abs(num), floor))
                    checked += 1
    finally:
        if probe:
            probe.close()
    return GradcheckResult(worst, checked, skipped)


def gradcheck(fragment: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], **kwargs) -> float:
    """Max relative error between analytic and central-difference gradients.

    Keyword arguments are those of :func:`gradcheck_details`.
    """
    return gradcheck_details(fragment, inputs, **kwargs).max_error
