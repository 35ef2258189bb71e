"""Training loop: patch sampling, stepped learning rate, loss logging.

One step draws a batch of aligned source patches, runs the model in training
mode on each, averages the per-patch objectives, and applies one optimiser
update. Everything is driven by seeded generators, so two runs with the same
configuration and corpus produce identical parameters; the per-step log is
identical too except for the wall-clock column.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import FinitenessError, Tensor
from .checkpoint import save_checkpoint
from .images import ImagePair, random_patches
from .losses import LossBreakdown, LossConfig, total_loss
from .model import AtfuseModel, ModelConfig
from .optim import AdamW

LOG_COLUMNS = ("epoch", "step", "lr", "l_part1", "l_part2",
               "l_texture", "total", "seconds")


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    initial_lr: float = 2e-3
    lr_halving_epochs: tuple[int, ...] = (50, 100, 200, 400)
    patch_size: int = 32
    patches_per_epoch: int = 800
    seed: int = 0
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_grad_norm: float = 0.0
    checkpoint_every: int = 50
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patches_per_epoch < 1:
            raise ValueError("epochs, batch_size, patches_per_epoch must be positive")
        if self.initial_lr <= 0.0:
            raise ValueError("initial_lr must be positive, got %r" % (self.initial_lr,))
        if list(self.lr_halving_epochs) != sorted(set(self.lr_halving_epochs)):
            raise ValueError("lr_halving_epochs must be strictly increasing")


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    lr: float
    l_part1: float
    l_part2: float
    l_texture: float
    total: float
    seconds: float

    def as_row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]

    @property
    def l_pixel(self) -> float:
        return self.l_part1 + self.l_part2


class TrainAbort(RuntimeError):
    """Training hit a non-finite value; carries the offending step."""

    def __init__(self, epoch: int, step: int, reason: str):
        super().__init__("aborted at epoch %d step %d: %s" % (epoch, step, reason))
        self.epoch = epoch
        self.step = step


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Initial rate halved once for every scheduled epoch already finished."""
    halvings = sum(1 for h in cfg.lr_halving_epochs if epoch > h)
    return cfg.initial_lr * (0.5 ** halvings)


def _epoch_seed(base_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([base_seed, epoch]).generate_state(1)[0])


def _mean_breakdown(parts: list[LossBreakdown]) -> dict[str, float]:
    keys = ("l_part1", "l_part2", "l_texture", "total")
    return {k: float(np.mean([b.floats()[k] for b in parts])) for k in keys}


def _clip_gradients(model: AtfuseModel, max_norm: float) -> None:
    grads = [p.grad for _, p in model.named_parameters() if p.grad is not None]
    total = math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads))
    if total > max_norm > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale


class _LogWriter:
    """Append-only CSV log; header written once, rows flushed per step."""

    def __init__(self, path: str | os.PathLike | None):
        self._fh = None
        self._writer = None
        if path is not None:
            path = Path(path)
            fresh = not path.exists() or path.stat().st_size == 0
            self._fh = open(path, "a", newline="")
            self._writer = csv.writer(self._fh)
            if fresh:
                self._writer.writerow(LOG_COLUMNS)

    def write(self, record: TrainLogRecord) -> None:
        if self._writer is not None:
            self._writer.writerow(record.as_row())
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def train(model: AtfuseModel, pairs: list[ImagePair], cfg: TrainConfig,
          log_path: str | os.PathLike | None = None,
          checkpoint_dir: str | os.PathLike | None = None) -> list[TrainLogRecord]:
    """Optimise the model on the corpus; returns every per-step log record."""
    optimizer = AdamW(model.named_parameters(), lr=cfg.initial_lr,
                      betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                      weight_decay=cfg.weight_decay)
    records: list[TrainLogRecord] = []
    log = _LogWriter(log_path)
    started = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = lr_at_epoch(cfg, epoch)
            patches = random_patches(pairs, patch=cfg.patch_size,
                                     count=cfg.patches_per_epoch,
                                     seed=_epoch_seed(cfg.seed, epoch))
            n_steps = max(1, len(patches) // cfg.batch_size)
            for step in range(n_steps):
                lo = step * cfg.batch_size
                hi = min(len(patches), lo + cfg.batch_size)
                try:
                    breakdowns = []
                    acc: Tensor | None = None
                    for i in range(lo, hi):
                        out = model.forward(patches.ir[i], patches.vi[i], train=True)
                        bd = total_loss(out, patches.ir[i], patches.vi[i], cfg.loss)
                        breakdowns.append(bd)
                        acc = bd.total if acc is None else acc + bd.total
                    batch_loss = acc * (1.0 / len(breakdowns))
                    optimizer.zero_grad()
                    batch_loss.backward()
                    if cfg.clip_grad_norm > 0.0:
                        _clip_gradients(model, cfg.clip_grad_norm)
                    optimizer.step(lr=lr)
                except FinitenessError as exc:
                    raise TrainAbort(epoch, step, str(exc)) from exc
                means = _mean_breakdown(breakdowns)
                record = TrainLogRecord(epoch=epoch, step=step, lr=lr,
                                        seconds=time.perf_counter() - started, **means)
                records.append(record)
                log.write(record)
            if checkpoint_dir is not None and cfg.checkpoint_every > 0 \
                    and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(model, Path(checkpoint_dir) / ("epoch_%04d.ckpt" % epoch))
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / "model.ckpt")
    finally:
        log.close()
    return records
