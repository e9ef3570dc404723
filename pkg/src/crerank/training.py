"""Mini-batch Adam loop with periodic validation and best-checkpoint selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from crerank.errors import DivergenceError
from crerank.numkit import Adam, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch: int = 512
    epochs: int = 5
    eval_every: int = 1000
    val_fraction: float = 0.05
    clip: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("batch/eval_every must be positive and epochs non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class Checkpoint:
    step: int
    epoch: int
    val_recall: float
    loss: float


@dataclass
class TrainLog:
    checks: list[Checkpoint] = field(default_factory=list)
    best_step: int = 0
    best_recall: float = -1.0
    steps: int = 0

    def rows(self):
        return [(c.step, c.epoch, c.val_recall, c.loss) for c in self.checks]


def split_validation(n: int, fraction: float, seed: int, stream: str = "split"):
    """Seeded random ``(train_idx, val_idx)`` split; both index arrays are sorted."""
    perm = make_rng(seed, stream).permutation(n)
    n_val = int(round(n * fraction))
    if fraction > 0 and n > 1:
        n_val = max(1, min(n_val, n - 1))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit(params: dict, loss_and_grad: Callable, n_train: int, cfg: TrainConfig,
        validate: Callable[[dict], float] | None = None, stream: str = "shuffle",
        trainable: list[str] | None = None):
    """Train ``params`` in place and return ``(best_params, log)``.

    ``loss_and_grad(params, batch_idx)`` returns ``(loss, grads)``; grads may
    omit parameters that receive no gradient. ``validate(params)`` returns the
    selection metric, evaluated every ``cfg.eval_every`` steps and once more
    after the final step.
    """
    cfg.validate()
    names = sorted(trainable if trainable is not None else params)
    opt = Adam(lr=cfg.lr, clip=cfg.clip)
    rng = make_rng(cfg.seed, stream)
    tlog = TrainLog()
    best = {k: v.copy() for k, v in params.items()}
    if cfg.epochs == 0 or n_train == 0:
        return best, tlog

    step, loss = 0, float("nan")

    def check(epoch: int) -> None:
        nonlocal best
        if validate is None:
            best = {k: v.copy() for k, v in params.items()}
            return
        recall = float(validate(params))
        tlog.checks.append(Checkpoint(step, epoch, recall, loss))
        log.info("step %d epoch %d loss %.5f val_recall %.4f", step, epoch, loss, recall)
        if recall > tlog.best_recall:
            tlog.best_recall, tlog.best_step = recall, step
            best = {k: v.copy() for k, v in params.items()}

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n_train)
        for lo in range(0, n_train, cfg.batch):
            idx = perm[lo:lo + cfg.batch]
            loss, grads = loss_and_grad(params, idx)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at step {step + 1} (epoch {epoch}, batch {len(idx)})")
            opt.step(params, {k: grads[k] for k in names if k in grads})
            step += 1
            if step % cfg.eval_every == 0:
                check(epoch)
    tlog.steps = step
    if step % cfg.eval_every != 0:
        check(cfg.epochs)
    return best, tlog
