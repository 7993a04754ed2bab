"""Training and evaluation loop with best-validation checkpointing."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from .autograd import NumericError, no_grad
from .checkpoint import Checkpoint
from .data import CounterRNG, Dataset, augment_batch, split
from .metrics import auroc, cross_entropy
from .model import ViT
from .optim import SGD, AdamW

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "train_loss", "val_auroc", "seconds")


class TrainingDivergedError(RuntimeError):
    pass


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    """Pin BLAS to a single worker thread while active."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    val_fraction: float = 0.2
    checkpoint_every: int = 0
    augment: bool = False
    deterministic: bool = True
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected adamw or sgd")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown train config field(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auroc: float
    seconds: float


@dataclass
class TrainResult:
    best: Checkpoint
    best_epoch: int
    best_auroc: float
    history: list[EpochRecord] = field(default_factory=list)


def _batch(dataset: Dataset, idx: np.ndarray):
    x = dataset.inputs[idx]
    if dataset.lengths is None:
        return x, None
    lengths = dataset.lengths[idx]
    return x[:, : int(lengths.max())], lengths


def predict(model: ViT, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Positive-class scores (logit difference) for every sample."""
    scores = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x, lengths = _batch(dataset, np.arange(start, min(start + batch_size, len(dataset))))
            logits = model(x, lengths).data
            scores.append(logits[:, -1] - logits[:, 0] if logits.shape[1] == 2 else logits[:, -1])
    return np.concatenate(scores).astype(np.float64)


def evaluate(model: ViT, dataset: Dataset, batch_size: int = 256) -> float:
    return auroc(predict(model, dataset, batch_size), dataset.labels)


def train(model: ViT, dataset: Dataset, config: TrainConfig, run_dir=None) -> TrainResult:
    """Train ``model`` in place and return the best-validation checkpoint.

    The dataset is split train/val by ``config.seed``.  When ``run_dir`` is
    given, ``metrics.csv``, ``best.ckpt`` and periodic ``epoch_XXX.ckpt``
    files are written there.  In deterministic mode the ``seconds`` column of
    ``metrics.csv`` is written as 0 and wall-clock times go to ``timing.csv``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    train_ds, val_ds = split(dataset, config.val_fraction, config.seed)
    params = model.parameters()
    if config.optimizer == "sgd":
        opt = SGD(params, config.lr)
    else:
        opt = AdamW(params, config.lr, config.betas, config.weight_decay)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    best_auroc, best_epoch = -np.inf, 0
    with deterministic(config.deterministic):
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = CounterRNG(config.seed, "shuffle", epoch).permutation(len(train_ds))
            losses = []
            for b0 in range(0, len(order), config.batch_size):
                idx = order[b0 : b0 + config.batch_size]
                x, lengths = _batch(train_ds, idx)
                if config.augment and lengths is None:
                    x = augment_batch(x, config.seed, epoch, idx)
                where = f"at epoch {epoch}, batch starting {b0}"
                with np.errstate(over="ignore", invalid="ignore"):
                    try:
                        loss = cross_entropy(model(x, lengths), train_ds.labels[idx])
                    except NumericError as exc:
                        raise TrainingDivergedError(f"{exc} {where}") from exc
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingDivergedError(f"non-finite loss {value} {where}")
                    opt.zero_grad()
                    loss.backward()
                bad = [n for n, p in model.named_parameters() if p.grad is not None and not np.isfinite(p.grad).all()]
                if bad:
                    raise TrainingDivergedError(f"non-finite gradient in {bad[0]} {where}")
                opt.step()
                losses.append(value * len(idx))
            val = evaluate(model, val_ds, config.eval_batch_size)
            record = EpochRecord(epoch, float(np.sum(losses) / len(train_ds)), val, time.perf_counter() - start)
            history.append(record)
            log.info("epoch %d loss %.4f val_auroc %.4f (%.1fs)", epoch, record.train_loss, val, record.seconds)
            meta = dict(epoch=epoch, val_auroc=val, train_loss=record.train_loss)
            if val > best_auroc:
                best_auroc, best_epoch = val, epoch
                best = Checkpoint.from_model(model, **meta)
                if run_dir is not None:
                    best.save(run_dir / "best.ckpt")
            if run_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                Checkpoint.from_model(model, **meta).save(run_dir / f"epoch_{epoch:03d}.ckpt")
    if run_dir is not None:
        write_metrics(history, run_dir / "metrics.csv", zero_seconds=config.deterministic)
        if config.deterministic:
            with open(run_dir / "timing.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("epoch", "seconds"))
                w.writerows((r.epoch, repr(r.seconds)) for r in history)
    return TrainResult(best, best_epoch, float(best_auroc), history)


def write_metrics(history: list[EpochRecord], path, zero_seconds: bool = False) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in history:
            w.writerow((r.epoch, repr(r.train_loss), repr(r.val_auroc), repr(0.0 if zero_seconds else r.seconds)))
    return path


def read_metrics(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [
            EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["val_auroc"]), float(row["seconds"]))
            for row in csv.DictReader(fh)
        ]
