"""Loss, Adam, and the epoch loop with validation-based model selection."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Normalizer, Sample, batch_arrays
from .metrics import Accumulator, MetricReport
from .model import Model

log = logging.getLogger(__name__)

CURVE_FIELDS = ("epoch", "train_loss", "val_rmse_norm", "val_rmse_db", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 20
    lr_decay: float = 0.5
    patience: int = 3
    seed: int = 0
    loss_mask_buildings: bool = False
    eval_mask_buildings: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean squared error over unmasked pixels (``mask`` True = excluded) and its gradient."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target.astype(pred.dtype, copy=False)
    if mask is not None:
        keep = ~np.asarray(mask, dtype=bool)
        n = int(keep.sum())
        if n == 0:
            raise ValueError("mask excludes every pixel")
        diff = np.where(keep, diff, 0)
    else:
        n = diff.size
    loss = float((diff.astype(np.float64) ** 2).sum() / n)
    return loss, (2.0 / n) * diff


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
    lr: float | None = None,
) -> tuple[list[np.ndarray], OptimizerState]:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    lr = config.learning_rate if lr is None else lr
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype, copy=False)
    return params, state


def _batches(samples: list[Sample], size: int):
    for i in range(0, len(samples), size):
        yield samples[i : i + size]


def predict(model: Model, samples: list[Sample], batch_size: int = 8) -> list[np.ndarray]:
    out = []
    for chunk in _batches(samples, batch_size):
        x, _, _ = batch_arrays(chunk, model.config.with_cars)
        out.extend(model.forward(x)[:, 0])
    return out


@dataclass
class SampleError:
    map_id: str
    tx: tuple[int, int]
    sse: float
    n_pixels: int

    @property
    def rmse(self) -> float:
        return math.sqrt(self.sse / self.n_pixels)


def evaluate(
    model: Model,
    samples: list[Sample],
    normalizer: Normalizer = Normalizer(),
    mask_buildings: bool = False,
    batch_size: int = 8,
    per_sample: list | None = None,
) -> MetricReport:
    """Aggregate RMSE/NMSE over every pixel of every sample (buildings optionally excluded).

    When ``per_sample`` is a list, one :class:`SampleError` per sample is appended.
    """
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    acc = Accumulator()
    for chunk in _batches(samples, batch_size):
        x, y, b = batch_arrays(chunk, model.config.with_cars)
        pred = model.forward(x)
        for i, s in enumerate(chunk):
            mask = ~b[i, 0] if mask_buildings else None
            before_sse, before_n = acc.sse, acc.n
            acc.add(pred[i, 0], y[i, 0], mask)
            if per_sample is not None:
                per_sample.append(SampleError(s.map_id, s.tx, acc.sse - before_sse, acc.n - before_n))
    return acc.result(normalizer.dynamic_range_db)


@dataclass
class TrainResult:
    best_params: list[np.ndarray]
    best_epoch: int
    best_val: MetricReport
    initial_val: MetricReport
    curves: list[dict] = field(default_factory=list)


def train(
    model: Model,
    train_set: list[Sample],
    val_set: list[Sample],
    config: TrainConfig,
    normalizer: Normalizer = Normalizer(),
    on_epoch=None,
) -> TrainResult:
    """Run the epoch loop; leaves ``model`` at its final weights.

    ``on_epoch(epoch, row, model, is_best)`` is called after each validation.
    Raises :class:`TrainingDiverged` as soon as a batch loss is non-finite.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    state = OptimizerState.zeros_like(model.params())
    lr = config.learning_rate
    initial = evaluate(model, val_set, normalizer, config.eval_mask_buildings)
    log.info("epoch 0: val rmse %.5f", initial.rmse_norm)
    best = (math.inf, 0, initial, [p.copy() for p in model.params()])
    stale = 0
    plateau_ref = initial.rmse_norm
    curves = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for step, chunk in enumerate(_batches([train_set[i] for i in order], config.batch_size)):
            x, y, b = batch_arrays(chunk, model.config.with_cars)
            pred = model.forward(x, keep=True)
            loss, grad = mse_loss(pred, y, b if config.loss_mask_buildings else None)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, step {step} (lr={lr:g}); "
                    "lower the learning rate or change the seed"
                )
            model.backward(grad)
            adam_step(model.params(), model.grad_list(), state, config, lr)
            total += loss * len(chunk)
            count += len(chunk)
        val = evaluate(model, val_set, normalizer, config.eval_mask_buildings)
        row = {
            "epoch": epoch,
            "train_loss": total / count,
            "val_rmse_norm": val.rmse_norm,
            "val_rmse_db": val.rmse_db,
            "lr": lr,
        }
        curves.append(row)
        is_best = val.rmse_norm < best[0]
        if is_best:
            best = (val.rmse_norm, epoch, val, [p.copy() for p in model.params()])
        log.info("epoch %d: loss %.6f val rmse %.5f lr %g", epoch, row["train_loss"], val.rmse_norm, lr)
        if on_epoch is not None:
            on_epoch(epoch, row, model, is_best)
        if val.rmse_norm < plateau_ref:
            plateau_ref, stale = val.rmse_norm, 0
        else:
            stale += 1
            if stale >= config.patience:
                lr *= config.lr_decay
                stale = 0
    return TrainResult(best[3], best[1], best[2], initial, curves)


def write_curves(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in CURVE_FIELDS[1:]])


def read_curves(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
