"""Label-smoothed cross-entropy, AdamW, and the epoch loop with validation-based selection."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import functional as F
from .data import Batch, DatasetIndex, make_batches
from .model import ConfigError, MamApp, MamAppConfig, build, load_checkpoint, read_checkpoint, save_checkpoint
from .nn import Parameter
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


# ----------------------------------------------------------------------- loss
def smoothed_targets(labels: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    """Correct class gets ``1 - s``; the other ``K - 1`` classes share ``s`` equally."""
    labels = np.asarray(labels)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {int(labels[i])} at sample {i} is outside [0, {num_classes})")
    q = np.full((len(labels), num_classes), smoothing / (num_classes - 1))
    q[np.arange(len(labels)), labels] = 1.0 - smoothing
    return q


def smoothed_cross_entropy(logits: Tensor, labels, smoothing: float = 0.1) -> Tensor:
    """Batch mean of ``-sum_k q_k log softmax(logits)_k``."""
    q = smoothed_targets(labels, logits.shape[-1], smoothing).astype(logits.dtype)
    return -(F.log_softmax(logits, axis=-1) * Tensor(q)).sum(axis=-1).mean()


def smoothing_floor(num_classes: int, smoothing: float) -> float:
    """Lowest attainable smoothed loss: the entropy of the target distribution."""
    off = smoothing / (num_classes - 1)
    h = -(1.0 - smoothing) * math.log(1.0 - smoothing)
    if smoothing > 0:
        h -= smoothing * math.log(off)
    return h


# ------------------------------------------------------------------ optimizer
class AdamW:
    """Adam with decoupled weight decay; parameters flagged ``decay=False`` are not decayed."""

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-5):
        self.params: list[tuple[str, Parameter]] = list(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            if self.weight_decay and getattr(p, "decay", True):
                p.data *= (1.0 - self.lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"adamw.m.{name}"] = self.m[name]
            out[f"adamw.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict, step_count: int) -> None:
        for name, p in self.params:
            self.m[name] = np.asarray(tensors[f"adamw.m.{name}"], dtype=p.dtype).copy()
            self.v[name] = np.asarray(tensors[f"adamw.v.{name}"], dtype=p.dtype).copy()
        self.step_count = step_count


def adamw_step(optimizer: AdamW) -> None:
    optimizer.step()


# ---------------------------------------------------------------------- logs
@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    records: list[EpochRecord] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "seconds")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_FIELDS)
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc),
                            f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path, seed: int = 0, config_hash: str = "") -> "TrainLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        recs = [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                            float(r["val_acc"]), float(r["seconds"])) for r in rows]
        return cls(seed=seed, config_hash=config_hash, records=recs)

    def deterministic_view(self) -> list[tuple]:
        """Everything except wall time, for reproducibility comparisons."""
        return [(r.epoch, r.train_loss, r.val_loss, r.val_acc) for r in self.records]


def config_hash(config: MamAppConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ----------------------------------------------------------------- evaluation
def predict_batches(model: MamApp, batches: Iterable[Batch], smoothing: float = 0.1):
    """Eval-mode pass returning (labels, predictions, per-sample losses, paths)."""
    model.eval()
    labels, preds, losses, paths = [], [], [], []
    with no_grad():
        for batch in batches:
            logits = model(batch.images)
            logp = F.log_softmax(logits, axis=-1).data
            q = smoothed_targets(batch.labels, logits.shape[-1], smoothing)
            losses.append(-(q * logp).sum(axis=-1))
            preds.append(np.argmax(logits.data, axis=-1))
            labels.append(batch.labels)
            paths.extend(batch.paths)
    if not labels:
        raise ValueError("cannot evaluate an empty split")
    return np.concatenate(labels), np.concatenate(preds), np.concatenate(losses), paths


def evaluate_epoch(model: MamApp, batches: Iterable[Batch], smoothing: float = 0.1) -> tuple[float, float]:
    """Mean loss and top-1 accuracy over a split."""
    y, p, losses, _ = predict_batches(model, batches, smoothing)
    return float(losses.mean()), float((y == p).mean())


# -------------------------------------------------------------------- train
@dataclass
class TrainResult:
    model: MamApp
    last_model: MamApp
    log: TrainLog
    best_epoch: Optional[int]
    optimizer: AdamW


def _better(acc: float, loss: float, best: Optional[tuple[float, float]]) -> bool:
    # ties on accuracy go to lower loss, remaining ties to the earlier epoch
    if best is None:
        return True
    return acc > best[0] or (acc == best[0] and loss < best[1])


def train(config: MamAppConfig, index: DatasetIndex, out_dir=None, workers: int = 1,
          resume=None, progress: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Train with AdamW on the ``train`` split and keep the best ``val`` epoch.

    When ``out_dir`` is given, ``best.ckpt``, ``last.ckpt`` (with optimizer
    state), ``trainlog.csv`` and ``summary.json`` are written there.
    """
    config.validate()
    size = tuple(config.input_size[:2])
    normalize = ((config.normalize_mean, config.normalize_std)
                 if config.normalize_mean is not None else None)
    model = build(config)
    opt = AdamW(model.named_parameters(), lr=config.lr, betas=config.betas, eps=config.adam_eps,
                weight_decay=config.weight_decay)
    classes = list(index.classes)
    if len(classes) != config.num_classes:
        raise ConfigError(f"dataset has {len(classes)} classes but config.num_classes is {config.num_classes}")
    trainlog = TrainLog(seed=config.seed, config_hash=config_hash(config))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start_epoch = 1
    best: Optional[tuple[float, float]] = None
    best_epoch: Optional[int] = None
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    if resume is not None:
        resumed, _ = load_checkpoint(resume, config)
        model.load_state_dict(resumed.state_dict())
        _, meta, tensors = read_checkpoint(resume)
        opt.load_state_tensors(tensors, int(meta["optimizer_step"]))
        start_epoch = int(meta["epoch"]) + 1
        if meta.get("best_epoch") is not None:
            best = (float(meta["best_val_acc"]), float(meta["best_val_loss"]))
            best_epoch = int(meta["best_epoch"])
            best_ckpt = Path(resume).with_name("best.ckpt")
            if best_ckpt.exists():
                best_state = load_checkpoint(best_ckpt, config)[0].state_dict()
        prev_log = Path(resume).with_name("trainlog.csv")
        if prev_log.exists():
            trainlog.records = [r for r in TrainLog.read_csv(prev_log).records if r.epoch < start_epoch]

    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        total, seen = 0.0, 0
        for b, batch in enumerate(make_batches(index, "train", config.batch_size, config.seed, epoch,
                                               image_size=size, augment_images=config.augment,
                                               workers=workers, normalize=normalize)):
            logits = model(batch.images)
            loss = smoothed_cross_entropy(logits, batch.labels, config.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, b, value)
            model.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(batch.labels)
            seen += len(batch.labels)
        val_loss, val_acc = evaluate_epoch(
            model, make_batches(index, "val", config.batch_size, config.seed, epoch, image_size=size,
                                workers=workers, normalize=normalize),
            config.label_smoothing)
        rec = EpochRecord(epoch, total / seen, val_loss, val_acc, time.perf_counter() - t0)
        trainlog.records.append(rec)
        if _better(val_acc, val_loss, best):
            best, best_epoch = (val_acc, val_loss), epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out is not None:
                save_checkpoint(model, config, out / "best.ckpt", meta={"epoch": epoch, "classes": classes})
        if out is not None:
            meta = {"epoch": epoch, "optimizer_step": opt.step_count, "best_epoch": best_epoch,
                    "best_val_acc": best[0], "best_val_loss": best[1], "classes": classes}
            save_checkpoint(model, config, out / "last.ckpt", extra=opt.state_tensors(), meta=meta)
            trainlog.write_csv(out / "trainlog.csv")
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f (%.1fs)",
                 epoch, rec.train_loss, val_loss, val_acc, rec.seconds)
        if progress is not None:
            progress(rec)

    best_model = build(config)
    best_model.load_state_dict(best_state)
    if out is not None:
        if best_epoch is None:
            save_checkpoint(model, config, out / "best.ckpt", meta={"epoch": 0, "classes": classes})
            save_checkpoint(model, config, out / "last.ckpt", extra=opt.state_tensors(),
                            meta={"epoch": 0, "optimizer_step": opt.step_count, "best_epoch": None,
                                  "classes": classes})
        trainlog.write_csv(out / "trainlog.csv")
        summary = {"best_epoch": best_epoch, "best_val_acc": best[0] if best else None,
                   "best_val_loss": best[1] if best else None, "epochs_run": len(trainlog.records),
                   "optimizer_steps": opt.step_count, "seed": config.seed,
                   "config_hash": trainlog.config_hash}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return TrainResult(model=best_model, last_model=model, log=trainlog, best_epoch=best_epoch,
                       optimizer=opt)
