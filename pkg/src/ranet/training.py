"""SGD training with the cumulative multi-classifier loss."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import augment_batch, channel_stats, normalize
from .errors import DataError, TrainingDivergedError, UsageError
from .inference import forward_anytime
from .network import forward_logits


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    initial_lr: float = 0.1
    lr_milestones: tuple = (15, 23)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss_weights: tuple | None = None  # None: weight 1 for every classifier
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.loss_weights is not None:
            object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        problems = []
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.initial_lr <= 0:
            problems.append("initial_lr must be positive")
        m = self.lr_milestones
        if any(b <= a for a, b in zip(m, m[1:])):
            problems.append("lr_milestones must be strictly increasing")
        if any(v < 0 or v >= self.epochs for v in m):
            problems.append(f"lr_milestones must lie in [0, epochs={self.epochs})")
        if not 0.0 < self.lr_decay < 1.0:
            problems.append("lr_decay must lie in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            problems.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.loss_weights is not None and any(not w > 0 for w in self.loss_weights):
            problems.append("loss_weights must be positive")
        if problems:
            raise UsageError("invalid training config: " + "; ".join(problems))

    @classmethod
    def cifar_recipe(cls, **overrides):
        """The full 300-epoch CIFAR schedule."""
        base = dict(epochs=300, batch_size=64, initial_lr=0.1, lr_milestones=(150, 225),
                    lr_decay=0.1, momentum=0.9, weight_decay=1e-4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk_recipe(cls, **overrides):
        """30 epochs with the milestones at the same relative positions (1/2, 3/4)."""
        base = dict(epochs=30, lr_milestones=(15, 23))
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["loss_weights"] = None if self.loss_weights is None else list(self.loss_weights)
        return d


@dataclass
class OptimizerState:
    velocity: list

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params])


def lr_at_epoch(cfg, epoch):
    drops = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.initial_lr * cfg.lr_decay ** drops


def cumulative_loss(logits, labels, weights=None):
    """Weighted sum of per-classifier cross-entropies (mean over the batch)."""
    K = len(logits)
    if weights is None:
        weights = (1.0,) * K
    if len(weights) != K:
        raise UsageError(f"{len(weights)} loss weights for {K} classifiers")
    total = None
    for lg, w in zip(logits, weights):
        ce, _ = ad.softmax_cross_entropy(lg, labels)
        term = ce if w == 1.0 else ad.scale(ce, w)
        total = term if total is None else ad.add(total, term)
    return total


def sgd_momentum_step(params, grads, state, lr, momentum, weight_decay):
    """v <- momentum*v + (grad + wd*p); p <- p - lr*v, in place.

    A ``None`` gradient counts as zero.
    """
    if not len(params) == len(grads) == len(state.velocity):
        raise UsageError(f"{len(params)} params, {len(grads)} grads, {len(state.velocity)} velocity buffers")
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or v.shape != p.data.shape:
            raise UsageError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, velocity {v.shape}")
        d = g.astype(p.data.dtype, copy=False)
        if weight_decay:
            d = d + weight_decay * p.data
        v *= momentum
        v += d
        p.data -= lr * v
    return params, state


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: list


@dataclass
class TrainResult:
    graph: object
    log: list
    state: OptimizerState
    mean: np.ndarray
    std: np.ndarray
    steps: int = 0
    history: list = field(default_factory=list)  # per-step losses

    @property
    def final_val_accuracy(self):
        return self.log[-1].val_accuracy if self.log else []


def accuracies(probs, labels):
    labels = np.asarray(labels)
    return [float(np.mean(np.argmax(p, axis=1) == labels)) if len(labels) else 0.0 for p in probs]


def evaluate_accuracy(graph, dataset, mean, std):
    """Per-classifier accuracy of ``dataset`` (raw pixels) under eval-mode BN."""
    if not len(dataset):
        return [0.0] * graph.num_classifiers
    return accuracies(forward_anytime(graph, normalize(dataset.images, mean, std)), dataset.labels)


def train_step(graph, x, y, cfg, state, lr, weights):
    params = graph.parameters()
    with ad.Tape() as tape:
        logits = forward_logits(graph, ad.Tensor(x), training=True)
        loss = cumulative_loss(logits, y, weights)
    value = float(loss.item())
    if not math.isfinite(value):
        return value
    ad.zero_grad(params)
    ad.backward(tape, loss)
    sgd_momentum_step(params, [p.grad for p in params], state, lr, cfg.momentum, cfg.weight_decay)
    return value


def train(graph, train_set, val_set, cfg, mean=None, std=None, log_path=None, progress=None):
    """Train ``graph`` in place.

    ``train_set``/``val_set`` hold raw [0, 1] pixels; normalization uses
    ``mean``/``std`` or, when absent, statistics of ``train_set``. Batch
    order comes from a (seed, epoch) stream and augmentation from a
    (seed, epoch, sample) stream, so runs are reproducible bit for bit.
    """
    if not len(train_set):
        raise DataError("training set is empty")
    K = graph.num_classifiers
    weights = cfg.loss_weights
    if weights is not None and len(weights) != K:
        raise UsageError(f"{len(weights)} loss weights for {K} classifiers")
    if mean is None:
        mean, std = channel_stats(train_set.images)
    plain = None if cfg.augment else normalize(train_set.images, mean, std)
    state = OptimizerState.zeros_like(graph.parameters())
    result = TrainResult(graph, [], state, mean, std)
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and seen:
                continue  # a lone trailing sample gives degenerate batch statistics
            if cfg.augment:
                x = augment_batch(train_set.images[idx], cfg.seed, epoch, idx, mean, std)
            else:
                x = plain[idx]
            y = train_set.labels[idx]
            value = train_step(graph, x, y, cfg, state, lr, weights)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            result.history.append(value)
            result.steps += 1
            total += value * len(idx)
            seen += len(idx)
        entry = EpochLog(epoch, lr, total / seen, evaluate_accuracy(graph, val_set, mean, std))
        result.log.append(entry)
        if progress is not None:
            progress(entry)
    if log_path is not None:
        write_epoch_log(log_path, result.log, K)
    return result


def write_epoch_log(path, log, num_classifiers):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss"] + [f"val_acc_{k}" for k in range(1, num_classifiers + 1)])
        for e in log:
            w.writerow([e.epoch, f"{e.lr:.6g}", f"{e.train_loss:.6f}"] + [f"{a:.4f}" for a in e.val_accuracy])
