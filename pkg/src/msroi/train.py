"""SGD with momentum, coupled L2 decay and per-epoch cosine learning rate."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import evaluate, ops
from .checkpoint import Checkpoint, CheckpointError
from .data import DatasetSplit
from .model import Model, build_model, forward
from .seeding import derive_seed, rng_for
from .tensor import NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_accuracy", "val_precision",
                  "val_recall", "val_f1", "val_auc")


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, batch: int, reason: str):
        super().__init__(f"training aborted at epoch {epoch}, batch {batch}: {reason}")
        self.epoch, self.batch = epoch, batch


@dataclass(frozen=True)
class OptimConfig:
    lr_max: float = 0.1
    lr_min: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    grad_clip: float = 1.0  # max global gradient norm per step; 0 disables

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("weight_decay >= 0, epochs >= 0 and batch_size >= 1 required")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")


def cosine_lr(epoch: int, total: int, lr_max: float = 0.1, lr_min: float = 1e-5) -> float:
    if total < 1 or not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    if epoch == 0:
        return lr_max
    if epoch == total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total))


def sgd_step(params: dict, grads: dict, velocities: dict, lr: float, config: OptimConfig):
    """One momentum step: v <- m*v - lr*(g + wd*theta); theta <- theta + v.

    All three maps are keyed by parameter name; returns (params, velocities).
    """
    new_p, new_v = {}, {}
    for name, p in params.items():
        theta = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        v = velocities.get(name)
        v = np.zeros_like(theta) if v is None else (v.data if isinstance(v, Tensor) else np.asarray(v))
        if not theta.shape == g.shape == v.shape:
            raise ValueError(f"{name}: param {theta.shape}, grad {g.shape}, velocity {v.shape}")
        if config.weight_decay:
            g = g + config.weight_decay * theta
        v = config.momentum * v - lr * g
        new_p[name] = Tensor(theta + v, trainable=True)
        new_v[name] = v
    return new_p, new_v


def clip_by_global_norm(grads: dict, max_norm: float):
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns (grads, norm before clipping).  ``max_norm`` 0 leaves them as is.
    """
    arrays = {k: g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64) for k, g in grads.items()}
    norm = math.sqrt(sum(float(np.dot(a.ravel(), a.ravel())) for a in arrays.values()))
    if max_norm <= 0 or norm <= max_norm:
        return arrays, norm
    scale = max_norm / norm
    return {k: a * scale for k, a in arrays.items()}, norm


class TrainResult(NamedTuple):
    checkpoint: Checkpoint
    history: list
    best: Checkpoint
    steps: int


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train(model: Model, data: DatasetSplit, optim: OptimConfig, meta: dict | None = None,
          start_epoch: int = 0) -> TrainResult:
    """Train for ``optim.epochs`` epochs; returns final and best-validation checkpoints."""
    if not data.train:
        raise ValueError("training split is empty")
    images = np.stack([s.image for s in data.train])
    labels = np.array([s.label for s in data.train], dtype=np.int64)
    n = len(labels)
    velocities: dict[str, np.ndarray] = {}
    history: list[dict] = []
    steps = 0
    best = Checkpoint.from_model(model, epoch=start_epoch, meta=meta)
    best_acc = -math.inf

    for epoch in range(optim.epochs):
        lr = cosine_lr(epoch, optim.epochs, optim.lr_max, optim.lr_min)
        perm = rng_for(optim.seed, f"shuffle/{epoch}").permutation(n)
        total_loss = 0.0
        for b, idx in enumerate(_batches(n, optim.batch_size, perm)):
            try:
                logits = forward(model, Tensor(images[idx]))
                loss = ops.softmax_cross_entropy(logits, labels[idx])
            except NonFiniteError as exc:
                raise TrainingAborted(epoch, b, str(exc)) from exc
            if not math.isfinite(loss.item()):
                raise TrainingAborted(epoch, b, "non-finite loss")
            names = list(model.params)
            g = backward(loss, [model.params[k] for k in names])
            grads, _ = clip_by_global_norm({k: g[model.params[k]] for k in names}, optim.grad_clip)
            params, velocities = sgd_step(model.params, grads, velocities, lr, optim)
            model = model.with_params(params)
            total_loss += loss.item() * len(idx)
            steps += 1
        val = evaluate.evaluate_samples(model, data.val)
        row = {"epoch": epoch, "lr": lr, "train_loss": total_loss / n,
               **{f"val_{k}": float(val[k]) for k in ("accuracy", "precision", "recall", "f1", "auc")}}
        history.append(row)
        log.info("epoch %d lr %.5g loss %.4f val_acc %.4f", epoch, lr, row["train_loss"], row["val_accuracy"])
        acc = row["val_accuracy"]
        if not math.isnan(acc) and acc > best_acc:
            best_acc = acc
            best = Checkpoint.from_model(model, velocities, start_epoch + epoch + 1, list(history), meta)

    final = Checkpoint.from_model(model, velocities, start_epoch + optim.epochs, history, meta)
    if best_acc == -math.inf:
        best = final
    return TrainResult(final, history, best, steps)


def finetune(ckpt: Checkpoint, data: DatasetSplit, optim: OptimConfig, meta: dict | None = None) -> TrainResult:
    """Continue from ``ckpt`` with fresh velocities and a fresh cosine schedule.

    All parameters are updated.  The classifier head is re-initialised when
    the new dataset has a different number of classes.
    """
    model = ckpt.to_model()
    k = data.num_classes
    if k != model.backbone.classes:
        backbone = replace(model.backbone, classes=k)
        fresh = build_model(backbone, model.ablation, seed=derive_seed(optim.seed, "finetune/head"))
        params = dict(model.params)
        params["head.weight"] = fresh.params["head.weight"]
        params["head.bias"] = fresh.params["head.bias"]
        model = replace(model, backbone=backbone, params=params)
    sample = data.train[0].image if data.train else None
    h, w, c = model.backbone.input_size
    if sample is not None and sample.shape != (c, h, w):
        raise CheckpointError(f"input mismatch: checkpoint expects [{c},{h},{w}], data is {list(sample.shape)}")
    return train(model, data, optim, meta=meta, start_epoch=ckpt.epoch)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(HISTORY_FIELDS)
        for row in history:
            wr.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
