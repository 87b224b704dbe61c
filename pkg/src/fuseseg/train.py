"""Training loop, evaluation, and run artifacts.

One iteration is: draw a shuffled batch, augment each sample with a seed
derived from (base seed, epoch, sample index), forward in training mode,
softmax cross-entropy, backward, one SGD-momentum step at the polynomial
learning rate.  Everything is seeded, so a rerun with the same config
produces byte-identical logs and checkpoints.

A run directory contains::

    run.json          metadata (configs, run id) when provided
    loss_log.csv      iter,lr,loss
    layer_stats.csv   run_id,iter,layer_name,group,mean,variance
    ckpt_XXXXXX.fwlb  snapshot at every statistics recording
    final.fwlb        state after the last iteration

Snapshots land at the same iterations as the statistics rows, so every row
can be re-derived from the matching checkpoint.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import Sample, batcher, random_crop_scale_flip, stack_batch
from .errors import DataError, TrainingError
from .metrics import MetricsReport, metrics_from_confusion, confusion_matrix
from .ops import cross_entropy
from .optim import SGDMomentum, poly_lr
from .rng import fold
from .stats import record_layer_stats, write_stats_csv
from .tensor import Tensor, backward, record

LOSS_HEADER = ["iter", "lr", "loss"]


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    poly_power: float = 0.9
    max_iter: int = 500
    batch_size: int = 8
    seed: int = 0
    stats_every: int = 100
    crop: int = 125
    augment: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainResult:
    out_dir: str
    loss_rows: list = field(default_factory=list)
    stats_rows: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    @property
    def final_checkpoint(self) -> str:
        return str(Path(self.out_dir) / "final.fwlb")


def write_loss_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_HEADER)
        for it, lr, loss in rows:
            writer.writerow([it, repr(lr), repr(loss)])


def read_loss_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(it), float(lr), float(loss)) for it, lr, loss in reader]


def train(model, samples: list[Sample], cfg: TrainConfig, out_dir,
          run_id: str = "run", meta: dict | None = None) -> TrainResult:
    """Run ``cfg.max_iter`` optimization steps and write the run artifacts."""
    if not samples:
        raise DataError("train: empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if meta is not None:
        (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")

    opt = SGDMomentum(model.parameters(), cfg.momentum, cfg.weight_decay)
    result = TrainResult(str(out))

    def snapshot(iteration: int):
        result.stats_rows.extend(record_layer_stats(model, iteration, run_id))
        path = out / f"ckpt_{iteration:06d}.fwlb"
        save_checkpoint(path, model, opt, iteration)
        result.snapshots.append(str(path))

    transform = None
    if cfg.augment:
        def transform(sample, epoch, index):
            return random_crop_scale_flip(sample, fold(cfg.seed, "aug", epoch, index), cfg.crop)

    stream = batcher(samples, cfg.batch_size, fold(cfg.seed, "shuffle"),
                     epochs=None, transform=transform)
    for it in range(cfg.max_iter):
        if cfg.stats_every > 0 and it % cfg.stats_every == 0:
            snapshot(it)
        images, masks = next(stream)
        lr = poly_lr(cfg.base_lr, it, cfg.max_iter, cfg.poly_power)
        x = Tensor(images)
        with record() as tape:
            logits = model.forward(x, training=True)
            loss = cross_entropy(logits, masks)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise TrainingError(f"non-finite loss at iter {it}: lr={lr}, loss={loss_val}")
        opt.zero_grad()
        backward(loss, tape)
        opt.step(lr)
        result.loss_rows.append((it, lr, loss_val))

    snapshot(cfg.max_iter)
    save_checkpoint(out / "final.fwlb", model, opt, cfg.max_iter)
    write_loss_csv(result.loss_rows, out / "loss_log.csv")
    write_stats_csv(result.stats_rows, out / "layer_stats.csv")
    return result


def _pad_to_divisor(images: np.ndarray, divisor: int) -> np.ndarray:
    h, w = images.shape[2:]
    ph = (divisor - h % divisor) % divisor
    pw = (divisor - w % divisor) % divisor
    if ph == 0 and pw == 0:
        return images
    return np.pad(images, ((0, 0), (0, 0), (0, ph), (0, pw)))


def predict(model, images: np.ndarray) -> np.ndarray:
    """Inference-mode per-pixel argmax class map for a (N, C, H, W) batch.

    Inputs whose extents are not divisible by the model's downsampling
    factor are zero-padded at the bottom/right and the logits cropped back.
    """
    h, w = images.shape[2:]
    x = Tensor(_pad_to_divisor(images, model.config.divisor))
    logits = model.forward(x, training=False)
    return np.argmax(logits.data[:, :, :h, :w], axis=1)


def evaluate(model, samples: list[Sample], batch_size: int = 8) -> MetricsReport:
    """Confusion-matrix metrics of a model over a dataset, inference mode."""
    if not samples:
        raise DataError("evaluate: empty dataset")
    k = model.config.classes
    conf = np.zeros((k, k), np.int64)
    for start in range(0, len(samples), batch_size):
        images, masks = stack_batch(samples[start:start + batch_size])
        preds = predict(model, images)
        conf += confusion_matrix(masks, preds, k)
    return metrics_from_confusion(conf)
