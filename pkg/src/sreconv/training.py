"""Losses, SGD with momentum, cosine annealing and the training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import ConfigError, LabelError, ShapeError
from .network import Network, save_checkpoint


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels).astype(np.int64).ravel()
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(logits.dtype)


def bce_loss(logits, targets):
    """Mean binary cross-entropy over all N*K logits, computed from the logits."""
    z = np.asarray(logits)
    t = np.asarray(targets)
    if t.shape != z.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {z.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise LabelError("binary cross-entropy targets must be 0 or 1")
    t = t.astype(z.dtype)
    # -[t log s + (1-t) log(1-s)] = max(z,0) - z t + log(1 + exp(-|z|))
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean()), ((expit(z) - t) / z.size).astype(z.dtype)


def loss_fn(kind: str):
    if kind == "cross_entropy":
        return cross_entropy_loss
    if kind == "bce":
        return bce_loss
    raise ConfigError(f"unknown loss kind {kind!r}")


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9):
    """Classic momentum, in place: ``v = momentum*v + g; p -= lr*v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= p.dtype.type(lr) * v
    return params, velocity


def cosine_lr(t: int, total: int, lr0: float) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 / 2 * (1 + math.cos(math.pi * t / total))


@dataclass
class TrainConfig:
    lr0: float = 0.02
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int | None = None  # None: 128 for 2D data, 4 for 3D
    seed: int = 0

    def validate(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if self.epochs < 1 or (self.batch_size is not None and self.batch_size < 1):
            raise ConfigError("epochs and batch_size must be >= 1")
        return self

    def resolved_batch_size(self, dims: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 128 if dims == 2 else 4

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float | None
    lr: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None

    def jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), separators=(",", ":")) + "\n" for r in self.records)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.jsonl())
        return path


def train_run(net: Network, dataset, cfg: TrainConfig, out_dir=None,
              on_epoch_end: Callable | None = None, log: Callable | None = None) -> TrainReport:
    """Train ``net`` in place on ``dataset`` (a LabeledDataset).

    No geometric augmentation.  The cosine schedule is stepped once per
    optimizer update over ``epochs * batches_per_epoch`` updates; the
    recorded ``lr`` is the scheduler value after the epoch's last update.
    """
    from .data import normalization_stats, to_network_input
    from .evaluation import accuracy

    cfg.validate()
    start = time.perf_counter()
    train_x, train_y = dataset.split("train")
    if len(train_x) == 0:
        raise ShapeError("training split is empty")
    dims = net.config.dims
    x_all = to_network_input(train_x, dims)
    net.set_normalization(*normalization_stats(x_all))
    net.check_input(x_all[:1])
    val = dataset.splits.get("val")
    val_x = to_network_input(val[0], dims) if val is not None and len(val[0]) else None
    loss_of = loss_fn(net.config.loss_kind)
    targets = np.asarray(train_y)
    if net.config.loss_kind == "cross_entropy":
        targets = targets.reshape(len(targets), -1)[:, 0]

    n = len(x_all)
    batch = cfg.resolved_batch_size(dims)
    per_epoch = math.ceil(n / batch)
    total = cfg.epochs * per_epoch
    velocity = {}
    params = net.parameters()
    step = 0
    report = TrainReport()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum = 0.0
        correct = 0.0
        for b in range(per_epoch):
            idx = order[b * batch : (b + 1) * batch]
            logits, cache = net.forward(x_all[idx], "train")
            loss, dlogits = loss_of(logits, targets[idx])
            grads = net.backward(dlogits, cache)
            sgd_step(params, grads, velocity, cosine_lr(step, total, cfg.lr0), cfg.momentum)
            net.mark_updated()
            step += 1
            loss_sum += loss * len(idx)
            correct += accuracy(logits, targets[idx]) * len(idx)
        val_acc = None
        if val_x is not None:
            val_acc = accuracy(net.predict(val_x), val[1])
        rec = EpochRecord(epoch + 1, loss_sum / n, correct / n, val_acc, cosine_lr(step, total, cfg.lr0))
        report.records.append(rec)
        if log is not None:
            log(f"epoch {rec.epoch}: loss {rec.train_loss:.4f} train_acc {rec.train_acc:.4f} "
                f"val_acc {rec.val_acc if rec.val_acc is None else round(rec.val_acc, 4)} lr {rec.lr:.5f}")
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, net)
    report.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.checkpoint = str(save_checkpoint(net, out / "checkpoint.srec"))
        report.write(out / "report.jsonl")
    return report
