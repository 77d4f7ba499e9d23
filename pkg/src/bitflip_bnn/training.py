"""Minibatch SGD training loop shared by baselines and stage-2 retraining."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np

from .binarizer import FINAL_TK, schedule_tk
from .core import Network, loss_and_grads, network_grads, network_params, recalibrate_bn, sgd_step

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``last_state`` holds the last finite network."""

    def __init__(self, msg, last_state: Network | None = None):
        super().__init__(msg)
        self.last_state = last_state


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 0.0
    lr_schedule: str = "cosine"  # cosine | constant
    schedule_unit: str = "epoch"  # binarizer iteration: epoch | step
    schedule_total: int = 0  # binarizer horizon in epochs; 0 means ``epochs``
    recalibrate: bool = True
    seed: int = 0
    dtype: str = "float32"


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(cfg.epochs, 1)))
    return cfg.lr


class BinarizeClock:
    """Maps training progress to the binarizer's ``(t, k)``."""

    def __init__(self, epochs: int, steps_per_epoch: int, unit: str = "epoch"):
        if unit not in ("epoch", "step"):
            raise ValueError(f"schedule unit must be 'epoch' or 'step', got {unit!r}")
        self.unit = unit
        self.steps_per_epoch = steps_per_epoch
        self.total = max((epochs if unit == "epoch" else epochs * steps_per_epoch) - 1, 1)

    def tk(self, epoch: int, step: int) -> tuple[float, float]:
        i = epoch if self.unit == "epoch" else epoch * self.steps_per_epoch + step
        return schedule_tk(min(i, self.total), self.total)


def train(net: Network, x, y, cfg: TrainConfig, callback=None) -> list[float]:
    """Train ``net`` in place; returns the mean loss of each epoch."""
    net.astype(cfg.dtype)
    x = np.asarray(x, dtype=net.dtype)
    rng = np.random.default_rng(cfg.seed)
    params = network_params(net)
    buffers: dict = {}
    steps = max(math.ceil(len(x) / cfg.batch_size), 1)
    clock = BinarizeClock(cfg.schedule_total or cfg.epochs, steps, cfg.schedule_unit)
    history = []
    last_good = None
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        net.train()
        total = 0.0
        for step, idx in enumerate(minibatches(len(x), cfg.batch_size, rng)):
            net.tk = clock.tk(epoch, step)
            try:
                loss, grads, _ = loss_and_grads(net, x[idx], y[idx])
            except FloatingPointError as exc:
                raise TrainingDiverged(f"diverged at epoch {epoch} step {step}: {exc}", last_good) from exc
            sgd_step(params, network_grads(grads), lr, cfg.momentum, buffers, cfg.weight_decay)
            total += loss * len(idx)
        history.append(total / len(x))
        net._cache = None
        last_good = copy.deepcopy(net)
        log.debug("epoch %d loss %.4f lr %.4f tk=%s", epoch, history[-1], lr, net.tk)
        if callback is not None:
            callback(epoch, net, history[-1])
    net.tk = FINAL_TK
    net.eval()
    if cfg.recalibrate and cfg.epochs:
        # batch-norm statistics gathered under the soft binarizer do not
        # match the hard-sign network that is deployed
        recalibrate_bn(net, x)
    return history
