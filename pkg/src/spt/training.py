"""Training recipe: AdamW, plateau LR decay, clipping, invalid-batch skipping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = 1.0
    plateau_patience_fraction: float = 0.2
    plateau_factor: float = 0.1
    batch_size: int = 512
    eval_batch_size: int = 1024
    n_epochs: int = 32
    seed: int = 0
    skip_invalid_gradients: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.n_epochs < 1:
            raise ValueError("batch_size and n_epochs must be positive")

    @property
    def patience(self) -> int:
        return max(1, math.ceil(self.plateau_patience_fraction * self.n_epochs))


class PlateauScheduler:
    """Multiply the LR by ``factor`` once ``patience`` consecutive epochs pass
    without the monitored metric beating its best value."""

    def __init__(self, optimizer, factor: float, patience: int):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = -math.inf
        self.stale = 0

    def step(self, metric: float) -> bool:
        if metric > self.best:
            self.best = metric
            self.stale = 0
            return False
        self.stale += 1
        if self.stale < self.patience:
            return False
        for group in self.optimizer.param_groups:
            group["lr"] *= self.factor
        self.stale = 0
        return True

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_acc: float
    valid_loss: float
    lr: float
    seconds: float
    skipped_batches: int


@dataclass
class RunMetrics:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_acc: float = -1.0
    test_acc: float | None = None
    test_loss: float | None = None

    @property
    def last(self) -> EpochRecord:
        return self.epochs[-1]

    def write_csv(self, path) -> None:
        """Per-epoch metrics. Wall-clock time lives in :meth:`write_timing` so
        this file is a deterministic function of config and seed."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "valid_acc", "lr", "skipped_batches"])
            for r in self.epochs:
                w.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.valid_acc:.6f}", repr(r.lr), r.skipped_batches])

    def write_timing(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "seconds"])
            for r in self.epochs:
                w.writerow([r.epoch, f"{r.seconds:.3f}"])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or "valid_acc" not in rows[0] or "epoch" not in rows[0]:
        raise ValueError(f"{path}: not a metrics file")
    try:
        return [{"epoch": int(r["epoch"]), "valid_acc": float(r["valid_acc"]),
                 "train_loss": float(r["train_loss"]), "lr": float(r["lr"]),
                 "skipped_batches": int(r["skipped_batches"])} for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed metrics row") from exc


def make_optimizer(model, config: TrainConfig):
    # AdamW applies weight decay directly to the weights, outside the moments
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                             betas=(config.beta1, config.beta2), eps=config.eps,
                             weight_decay=config.weight_decay)


def gradients_finite(model) -> bool:
    return all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None)


def global_grad_norm(model) -> float:
    grads = [p.grad.detach().flatten() for p in model.parameters() if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.cat(grads))) if grads else 0.0


def train_step(model, optimizer, batch, labels, config: TrainConfig) -> tuple[float, bool]:
    """One optimisation step. Returns ``(loss, skipped)``.

    A batch whose loss or gradients are not finite leaves parameters and
    optimizer state untouched when ``skip_invalid_gradients`` is set.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = F.cross_entropy(model(batch).logits, labels)
    loss.backward()
    if config.skip_invalid_gradients and not (torch.isfinite(loss) and gradients_finite(model)):
        optimizer.zero_grad(set_to_none=True)
        return float(loss.detach()), True
    if config.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
    optimizer.step()
    return float(loss.detach()), False


@torch.no_grad()
def evaluate(model, dataset, batch_size: int = 1024) -> tuple[float, float]:
    """Accuracy and mean cross-entropy over ``dataset`` in eval mode.

    ``argmax`` resolves ties to the smallest class index.
    """
    n = len(dataset)
    if n == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    model.eval()
    correct, total_loss = 0, 0.0
    for start in range(0, n, batch_size):
        batch, labels = dataset.batch(np.arange(start, min(n, start + batch_size)))
        logits = model(batch).logits
        total_loss += float(F.cross_entropy(logits, labels, reduction="sum"))
        correct += int((logits.argmax(-1) == labels).sum())
    return correct / n, total_loss / n


def train(model, train_set, valid_set, config: TrainConfig, out_dir=None, test_set=None,
          progress=None) -> RunMetrics:
    """Run the epoch loop, keeping the checkpoint with the best validation accuracy.

    ``train_set``/``valid_set``/``test_set`` expose ``len()`` and
    ``batch(indices) -> (PatchBatch, labels)``. With ``out_dir`` set, the
    best checkpoint and the metrics/timing CSVs are written there.
    """
    if len(train_set) == 0 or len(valid_set) == 0:
        raise TrainingError("empty training or validation set")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    scheduler = PlateauScheduler(optimizer, config.plateau_factor, config.patience)
    metrics = RunMetrics()
    best_state = None

    for epoch in range(1, config.n_epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_set))
        lr = scheduler.lr
        losses, skipped = [], 0
        for b, first in enumerate(range(0, len(order), config.batch_size)):
            batch, labels = train_set.batch(np.sort(order[first:first + config.batch_size]))
            loss, was_skipped = train_step(model, optimizer, batch, labels, config)
            if b == 0 and not math.isfinite(loss):
                raise TrainingError(f"epoch {epoch}: non-finite loss {loss} on the first batch")
            if was_skipped:
                skipped += 1
                log.warning("epoch %d batch %d: invalid gradients, batch skipped", epoch, b)
            else:
                losses.append(loss)
            if progress is not None:
                progress(epoch, b, loss)
        valid_acc, valid_loss = evaluate(model, valid_set, config.eval_batch_size)
        record = EpochRecord(epoch, float(np.mean(losses)) if losses else math.nan, valid_acc, valid_loss,
                             lr, time.perf_counter() - start, skipped)
        metrics.epochs.append(record)
        log.info("epoch %d: loss %.4f valid_acc %.4f lr %g (%.1fs)", epoch, record.train_loss,
                 valid_acc, lr, record.seconds)
        if valid_acc > metrics.best_valid_acc:
            metrics.best_valid_acc, metrics.best_epoch = valid_acc, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if out_dir is not None:
                save_checkpoint(model, out_dir / "best.ckpt")
        scheduler.step(valid_acc)
        if out_dir is not None:
            metrics.write_csv(out_dir / "metrics.csv")
            metrics.write_timing(out_dir / "timing.csv")

    if test_set is not None and best_state is not None:
        model.load_state_dict(best_state)
        metrics.test_acc, metrics.test_loss = evaluate(model, test_set, config.eval_batch_size)
    return metrics


def config_text(config) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(config).items())
