"""Speaker-disjoint cross-validation, training with validation-loss selection,
and accuracy / confusion reporting."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels as K
from .datamodel import NUM_CLASSES, SceneLabel, Segment
from .models import Checkpoint, Model, ModelSpec, build_model, checkpoint_bytes, count_params, load_checkpoint_bytes

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    dropout: float = 0.3
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    # re-estimate BN running statistics with dropout off after every epoch;
    # 0 disables, otherwise the number of training batches used
    bn_calibration_batches: int = 4

    @classmethod
    def from_overrides(cls, overrides: dict | None) -> "TrainConfig":
        overrides = dict(overrides or {})
        unknown = set(overrides) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**overrides)


@dataclass(frozen=True)
class Fold:
    index: int
    test: tuple[str, ...]
    validation: tuple[str, ...]
    train: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]

    @property
    def k(self) -> int:
        return len(self.folds)


def make_folds(participants: Sequence[str], k: int = 10, seed: int = 0, n_val: int = 4) -> FoldPlan:
    """Shuffle participants, deal them round-robin into ``k`` test folds and
    draw validation speakers from each fold's training side."""
    ids = sorted(set(participants))
    if len(ids) != len(participants):
        raise ValueError("duplicate participant ids")
    if k < 2:
        raise ValueError("need at least 2 folds")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} participants cannot fill {k} folds")
    order = list(ids)
    K.make_rng(seed, "folds").shuffle(order)
    buckets = [order[i::k] for i in range(k)]
    folds = []
    for i, test in enumerate(buckets):
        rest = [p for p in order if p not in set(test)]
        n = min(n_val, len(rest) - 1)
        val = select_validation(rest, n, K.make_rng(seed, "validation", i))
        train = tuple(p for p in rest if p not in val)
        folds.append(Fold(i, tuple(test), tuple(sorted(val)), train))
    return FoldPlan(tuple(folds))


def select_validation(train_participants: Sequence[str], n: int = 4, seed=0) -> set[str]:
    """Pick ``n`` distinct hold-out speakers; ``seed`` may be an int or a Generator."""
    ids = sorted(train_participants)
    if n < 0:
        raise ValueError("validation size must be non-negative")
    if n and len(ids) <= n:
        raise ValueError(f"cannot hold out {n} of {len(ids)} training participants")
    rng = seed if isinstance(seed, np.random.Generator) else K.make_rng(seed, "validation")
    return set(rng.choice(ids, size=n, replace=False).tolist()) if n else set()


# ---------------------------------------------------------------- training


def stack_segments(segments: Sequence[Segment], dtype=np.float32):
    if not segments:
        raise ValueError("no segments")
    x = np.stack([s.matrix for s in segments]).astype(dtype, copy=False)
    y = np.array([int(s.label) if s.label is not None else -1 for s in segments], dtype=np.int64)
    return x, y


def best_epoch(val_losses: Sequence[float]) -> int:
    """1-based epoch of the lowest validation loss (earliest on ties)."""
    if not val_losses:
        raise ValueError("no validation losses")
    return int(np.argmin(np.asarray(val_losses))) + 1


def mean_loss(model: Model, x, y, batch_size=64) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        logits = model.forward_batch(x[i : i + batch_size], "eval")
        loss, _ = K.softmax_cross_entropy(logits, y[i : i + batch_size])
        total += loss * len(logits)
    return total / len(x)


def recalibrate_batchnorm(model: Model, x, batch_size=64, max_batches=4) -> None:
    """Replace BN running statistics by averages over dropout-free passes.

    Dropout in front of a BN layer inflates the variance that layer sees in
    training, so momentum-tracked statistics do not match the deterministic
    eval-mode network.
    """
    dropouts = [l for _, l in model._layers() if isinstance(l, K.Dropout)]
    rates = [d.rate for d in dropouts]
    bns = [l for _, l in model.bn_layers()]
    saved = [b.stats.momentum for b in bns]
    for b in bns:
        b.stats.running_mean = b.stats.running_var = None
    try:
        for d in dropouts:
            d.rate = 0.0
        starts = list(range(0, len(x), batch_size))[:max_batches]
        for n, i in enumerate(starts, start=1):
            for b in bns:
                b.stats.momentum = (n - 1) / n
            model.forward_batch(x[i : i + batch_size], "train")
    finally:
        for d, r in zip(dropouts, rates):
            d.rate = r
        for b, m in zip(bns, saved):
            b.stats.momentum = m


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoint_bytes: bytes
    curves: list[tuple[int, float, float]]
    best_epoch: int
    best_val_loss: float


def train(
    model: Model,
    train_segments: Sequence[Segment],
    val_segments: Sequence[Segment],
    config: TrainConfig = TrainConfig(),
    rng: np.random.Generator | None = None,
) -> TrainResult:
    """Minibatch Adam on cross-entropy; keep the weights of the epoch with the
    lowest validation loss (the final epoch when no validation data)."""
    if not train_segments:
        raise ValueError("empty training set")
    rng = rng if rng is not None else K.make_rng(config.seed, "train")
    x, y = stack_segments(train_segments, model.dtype)
    if np.any(y < 0):
        raise ValueError("training segments must be labeled")
    xv, yv = stack_segments(val_segments, model.dtype) if val_segments else (None, None)
    for _, layer in model._layers():
        if isinstance(layer, K.Dropout):
            layer.rate = config.dropout
    params = model.named_params()
    state = K.AdamState(config.lr, config.beta1, config.beta2)
    curves = []
    best = (math.inf, 0, b"")
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x))
        losses, weights = [], []
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            if len(idx) < 2 and len(order) > 1:
                # batch statistics of a single example are degenerate
                continue
            loss, grads = model.loss_and_grads(x[idx], y[idx], rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {i // config.batch_size}")
            K.adam_step(params, grads, state)
            losses.append(loss)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        if config.bn_calibration_batches:
            recalibrate_batchnorm(model, x[order], config.batch_size, config.bn_calibration_batches)
        val_loss = mean_loss(model, xv, yv, config.batch_size) if xv is not None else math.nan
        if xv is not None and not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        curves.append((epoch, train_loss, val_loss))
        log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if xv is None:
            best = (val_loss, epoch, None)
            continue
        if val_loss < best[0]:
            best = (val_loss, epoch, checkpoint_bytes(model))
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    val_loss, epoch, blob = best
    meta = {"seed": config.seed, "epoch": epoch, "val_loss": None if math.isnan(val_loss) else val_loss}
    if blob is None:
        blob = checkpoint_bytes(model, meta)
    else:
        blob = checkpoint_bytes(load_checkpoint_bytes(blob).model, meta)
    return TrainResult(load_checkpoint_bytes(blob), blob, curves, epoch, val_loss)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    accuracy: float
    counts: np.ndarray  # confusion counts, rows = true class
    confusion: np.ndarray  # row-normalized; NaN rows for classes absent from the test data

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def confusion_counts(y_true, y_pred, num_classes=NUM_CLASSES) -> np.ndarray:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return counts


def evaluate_predictions(y_true, y_pred, num_classes=NUM_CLASSES) -> EvalResult:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("empty test set")
    counts = confusion_counts(y_true, y_pred, num_classes)
    rows = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.where(rows > 0, counts / np.maximum(rows, 1), np.nan)
    return EvalResult(float(np.mean(y_true == y_pred)), counts, conf)


class ConstantPredictor:
    """Always answers one class; the majority-guess baseline."""

    def __init__(self, label: SceneLabel = SceneLabel.NS):
        self.label = SceneLabel(label)

    def predict_batch(self, x, batch_size=64):
        return np.full(len(x), int(self.label), dtype=np.int64)

    @classmethod
    def majority_of(cls, segments: Sequence[Segment]) -> "ConstantPredictor":
        counts = np.bincount([int(s.label) for s in segments], minlength=NUM_CLASSES)
        return cls(SceneLabel(int(np.argmax(counts))))


def evaluate(model, test_segments: Sequence[Segment]) -> EvalResult:
    if not test_segments:
        raise ValueError("empty test set")
    x, y = stack_segments(test_segments, getattr(model, "dtype", np.float32))
    return evaluate_predictions(y, model.predict_batch(x))


# ---------------------------------------------------------------- cross-validation


@dataclass
class EvalReport:
    model: str
    mode: str
    params: int
    fold_accuracies: list[float]
    mean_confusion: np.ndarray
    fold_counts: list[int]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))


@dataclass
class FoldOutcome:
    fold: int
    result: EvalResult
    train: TrainResult
    predictions: list[tuple[str, str, int, int]]  # participant, shift, start_ts, predicted class


@dataclass
class CVResult:
    reports: list[EvalReport]
    outcomes: dict[str, list[FoldOutcome]] = field(default_factory=dict)
    plan: FoldPlan | None = None

    def predictions(self, model: str) -> dict[tuple[str, str, int], SceneLabel]:
        return {(p, s, t): SceneLabel(c) for o in self.outcomes[model] for p, s, t, c in o.predictions}


def filter_mode(segments: Sequence[Segment], mode: str) -> list[Segment]:
    if mode == "full":
        return list(segments)
    if mode == "fg_active":
        return [s for s in segments if s.fg_active]
    raise ValueError(f"unknown mode {mode!r}")


def run_fold(spec: ModelSpec, fold: Fold, by_pid: dict[str, list[Segment]], config: TrainConfig) -> FoldOutcome:
    pick = lambda pids: [s for p in pids for s in by_pid.get(p, [])]
    train_segs, val_segs, test_segs = pick(fold.train), pick(fold.validation), pick(fold.test)
    model = build_model(replace(spec, dropout=config.dropout), K.make_rng(config.seed, "init", spec.kind, fold.index))
    tr = train(model, train_segs, val_segs, config, K.make_rng(config.seed, "train", spec.kind, fold.index))
    best = tr.checkpoint.model
    if not test_segs:
        raise ValueError(f"fold {fold.index} has no test segments")
    x, y = stack_segments(test_segs, best.dtype)
    pred = best.predict_batch(x)
    result = evaluate_predictions(y, pred)
    preds = [(s.participant_id, s.shift_id, s.start_ts_ms, int(c)) for s, c in zip(test_segs, pred)]
    log.info("%s fold %d: acc %.4f (best epoch %d)", spec.kind, fold.index, result.accuracy, tr.best_epoch)
    return FoldOutcome(fold.index, result, tr, preds)


def cross_validate(
    segments: Sequence[Segment],
    specs: Sequence[ModelSpec],
    mode: str = "full",
    config: TrainConfig = TrainConfig(),
    k: int = 10,
    participants: Sequence[str] | None = None,
    jobs: int = 1,
    plan: FoldPlan | None = None,
) -> CVResult:
    """Train and test one model per (spec, fold); folds are speaker-disjoint."""
    segs = filter_mode(segments, mode)
    by_pid: dict[str, list[Segment]] = {}
    for s in segs:
        by_pid.setdefault(s.participant_id, []).append(s)
    pids = sorted(participants if participants is not None else {s.participant_id for s in segments})
    plan = plan or make_folds(pids, k, config.seed)
    reports, outcomes = [], {}
    for spec in specs:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(run_fold, spec, f, by_pid, config) for f in plan.folds]
                fold_out = [f.result() for f in futures]
        else:
            fold_out = [run_fold(spec, f, by_pid, config) for f in plan.folds]
        fold_out.sort(key=lambda o: o.fold)
        outcomes[spec.kind] = fold_out
        with warnings.catch_warnings():
            # classes absent from every test fold stay NaN
            warnings.simplefilter("ignore", RuntimeWarning)
            conf = np.nanmean(np.stack([o.result.confusion for o in fold_out]), axis=0)
        reports.append(
            EvalReport(
                spec.kind,
                mode,
                count_params(build_model(spec)),
                [o.result.accuracy for o in fold_out],
                conf,
                [o.result.n for o in fold_out],
            )
        )
    return CVResult(reports, outcomes, plan)


# ---------------------------------------------------------------- report files


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def write_report_csv(reports: Sequence[EvalReport], path) -> None:
    k = max(len(r.fold_accuracies) for r in reports)
    header = ["model", "mode", "params", "mean_acc"] + [f"fold{i}" for i in range(k)]
    lines = [",".join(header)]
    for r in reports:
        cells = [r.model, r.mode, str(r.params), _fmt(r.mean_accuracy)] + [_fmt(a) for a in r.fold_accuracies]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_confusion_csv(report: EvalReport, path) -> None:
    names = [s.code for s in SceneLabel]
    lines = ["true\\pred," + ",".join(names)]
    for name, row in zip(names, report.mean_confusion):
        lines.append(name + "," + ",".join(_fmt(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_curves_csv(curves, path) -> None:
    lines = ["epoch,train_loss,val_loss"] + [f"{e},{_fmt(t)},{_fmt(v)}" for e, t, v in curves]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
