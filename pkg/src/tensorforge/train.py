"""Training and evaluation loops used by the command line harness."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .metrics import MetricsLog
from .models import MODELS
from .trainkit.data import DatasetSplit
from .trainkit.loss import SoftmaxCrossEntropy
from .trainkit.optim import make_optimizer

# wall clock for epoch timing; module-level so a harness can substitute its own
CLOCK = time.perf_counter


@dataclass
class TrainConfig:
    net: str = "fig2_resnet"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    data_dir: str | None = None
    subset: int | None = 2000
    sync: bool = True
    check: bool = True
    conv_threshold: int = 64
    metrics_out: str | None = None
    checkpoint: str | None = None
    eval_limit: int | None = 2000

    def validate(self) -> "TrainConfig":
        problems = []
        if self.net not in MODELS:
            problems.append(f"net must be one of {sorted(MODELS)}, got {self.net!r}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch-size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.subset is not None and self.subset < 1:
            problems.append(f"subset must be >= 1, got {self.subset}")
        if self.conv_threshold < 1:
            problems.append(f"conv-threshold must be >= 1, got {self.conv_threshold}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def accuracy(net, eg, split: DatasetSplit, batch_size: int = 256) -> float:
    """Inference-mode top-1 accuracy over ``split`` (short final batch included)."""
    if len(split) == 0:
        return 0.0
    was_training = net.training
    net.eval()
    it = split.buffered_iter(eg, batch_size, shuffle=False, drop_last=False)
    correct = 0
    try:
        while it.has_next():
            x8, y = it.next()
            x = eg.to_float(x8)
            logits = net.forward(x)[0].numpy()
            correct += int((logits.argmax(1) == y.numpy().argmax(1)).sum())
            net.gc()
            for t in (x8, x, y):
                t.delete()
    finally:
        it.close()
        if was_training:
            net.train()
    return correct / len(split)


class Trainer:
    """One forward/loss/backward/update/clear/recycle cycle per mini-batch."""

    def __init__(self, net, eg, cfg: TrainConfig, clock=None, on_iteration=None):
        self.net = net
        self.eg = eg
        self.cfg = cfg
        self.opt = make_optimizer(cfg.optimizer, net.params(), cfg.lr)
        self.loss = SoftmaxCrossEntropy()
        self.clock = clock or CLOCK
        self.on_iteration = on_iteration
        self.log = MetricsLog()
        self.iteration = 0
        self.epoch_losses: list[float] = []
        self.epoch_seconds: list[float] = []

    def step(self, x8, y) -> float:
        eg, net = self.eg, self.net
        x = eg.to_float(x8)
        yh = net.forward(x)[0]
        value = self.loss.loss(yh, y)
        g = self.loss.gradient(yh, y)
        net.backward(g)
        self.opt.update().clear_grads()
        net.gc()
        for t in (x8, x, y, g):
            t.delete()
        return value

    def fit(self, split: DatasetSplit) -> MetricsLog:
        cfg, eg = self.cfg, self.eg
        it = split.buffered_iter(eg, cfg.batch_size, seed=cfg.seed, shuffle=True)
        total = 0.0
        try:
            for epoch in range(1, cfg.epochs + 1):
                if epoch == 2:
                    # first epoch always validates and synchronizes; requested modes apply after
                    eg.set_flags(sync=cfg.sync, check=cfg.check)
                if epoch > 1:
                    it.reset(True)
                losses = []
                t0 = self.clock()
                while it.has_next():
                    x8, y = it.next()
                    value = self.step(x8, y)
                    self.iteration += 1
                    losses.append(value)
                    self.log.record(self.iteration, epoch, value)
                    if self.on_iteration is not None:
                        self.on_iteration(self)
                eg.synchronize()
                dt = self.clock() - t0
                total += dt
                self.epoch_seconds.append(dt)
                self.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        finally:
            it.close()
            eg.set_flags(sync=True, check=True)
        self.log.summary.update({
            "iterations": self.iteration,
            "total_train_seconds": round(total, 6),
            "final_epoch_loss": self.epoch_losses[-1] if self.epoch_losses else "nan",
            "epoch_seconds": ";".join(f"{s:.3f}" for s in self.epoch_seconds),
            "peak_pool_bytes": eg.pool_stats().peak_in_use_bytes,
        })
        return self.log
