"""Shared minibatch training loop: seeded shuffles, Adam, early stopping,
per-epoch metrics. Used by every trainable model in the package."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import Adam, EarlyStopper

# Mixed into the validation rng seed so it never collides with the train stream.
_VAL_STREAM = 0x56414C


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 512
    learning_rate: float = 1e-4
    seed: int = 0
    patience: int = 25
    min_improvement: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "wall_seconds": self.wall_seconds,
        }


def as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    """Accept a LabeledDataset or an (X, Y) pair."""
    if hasattr(data, "features") and hasattr(data, "labels"):
        return data.features, data.labels
    x, y = data
    return np.asarray(x), np.asarray(y)


def validation_loss(model, data, seed) -> float:
    """Eval-mode loss on a dataset with a dedicated seeded noise stream."""
    x, y = as_xy(data)
    tape = ad.Tape()
    rng = np.random.default_rng(seed)
    loss = model.loss_graph(tape, x, y, rng=rng, train=False)
    return float(loss.value)


def fit(model, train_data, val_data, config: TrainConfig, on_epoch=None) -> list[EpochRecord]:
    """Minimize the model's mean per-datapoint loss over minibatches.

    The model protocol is: ``parameters()``, ``gradients(tape)`` and
    ``loss_graph(tape, x, y, rng, train)`` returning a scalar Var in nats per
    datapoint. One rng stream (from ``config.seed``) drives shuffles, noise
    draws and dropout masks, so identical config + seed reproduce identical
    metrics. Early stopping watches the validation loss. Raises NumericError
    naming the epoch and batch if the loss goes non-finite.
    """
    x_train, y_train = as_xy(train_data)
    n = x_train.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    adam = Adam(model.parameters(), learning_rate=config.learning_rate)
    stopper = EarlyStopper(config.patience, config.min_improvement)
    history: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        perm = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            try:
                tape = ad.Tape()
                loss = model.loss_graph(
                    tape, x_train[idx], y_train[idx], rng=rng, train=True
                )
                value = float(loss.value)
                if not math.isfinite(value):
                    raise ad.NumericError("loss is non-finite")
                tape.backward(loss)
                adam.step(model.gradients(tape))
            except ad.NumericError as e:
                raise ad.NumericError(f"epoch {epoch}, batch {bi}: {e}") from e
            total += value * len(idx)
        val_loss = validation_loss(
            model, val_data, seed=[config.seed, _VAL_STREAM, epoch]
        )
        record = EpochRecord(
            epoch=epoch,
            train_loss=total / n,
            val_loss=val_loss,
            wall_seconds=time.monotonic() - t0,
        )
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if stopper.update(val_loss):
            break
    return history
