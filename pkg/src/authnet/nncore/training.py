from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from authnet.nncore.losses import cross_entropy, mse, one_hot, softmax
from authnet.nncore.model import SequentialModel, backward, forward
from authnet.nncore.optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_size: int = 128
    lr_decay_factor: float = 1.0
    lr_decay_period: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_period > 0:
            return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_period)
        return self.learning_rate


def prefix_features(model: SequentialModel, x: np.ndarray, stop: int, chunk: int = 2000) -> np.ndarray:
    if stop == 0:
        return np.asarray(x, dtype=np.float64)
    parts = [forward(model, x[i:i + chunk], 0, stop) for i in range(0, len(x), chunk)]
    return np.concatenate(parts)


def fit(model: SequentialModel, x: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
        loss: str = "ce", frozen_prefix: int = 0, on_epoch=None) -> list[dict]:
    """Mini-batch Adam on ``model`` in place.

    ``loss`` is ``"ce"`` (integer labels), ``"ce-soft"`` or ``"mse-soft"``
    (probability-row targets).  Layers before ``frozen_prefix`` are held fixed
    and their output is computed once up front.  ``on_epoch(model, epoch)``
    may return extra columns for the history row.
    """
    k = model.num_classes
    feats = prefix_features(model, x, frozen_prefix)
    tgt = one_hot(targets, k) if loss == "ce" else np.asarray(targets, dtype=np.float64)
    n = len(feats)
    if n == 0:
        raise TrainingError("empty training set")
    for layer in model.layers[:frozen_prefix]:
        layer.frozen = True
    trainable = model.trainable()
    params = [p for p, _ in trainable]
    grads = [g for _, g in trainable]
    state = AdamState.for_params(params)
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(cfg.rng_seed + epoch).permutation(n)
        lr = cfg.lr_at(epoch)
        total, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            logits = forward(model, feats[idx], start=frozen_prefix, record=True)
            if loss == "mse-soft":
                probs = softmax(logits)
                value, gp = mse(probs, tgt[idx])
                # chain through softmax: J^T g = p * (g - <p, g>)
                glogits = probs * (gp - np.sum(probs * gp, axis=1, keepdims=True))
            else:
                value, glogits = cross_entropy(logits, tgt[idx], soft=(loss != "ce"))
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(model, glogits, start=frozen_prefix, input_grad=False)
            adam_step(params, grads, state, lr)
            total += value * len(idx)
            correct += int(np.sum(np.argmax(logits, 1) == np.argmax(tgt[idx], 1)))
        model.clear()
        row = {"epoch": epoch + 1, "loss": total / n, "acc": correct / n}
        if on_epoch is not None:
            row.update(on_epoch(model, epoch + 1) or {})
        log.info("epoch %d loss %.4f acc %.4f", epoch + 1, row["loss"], row["acc"])
        history.append(row)
    model.zero_grad()
    return history


def train_clean(model: SequentialModel, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                on_epoch=None):
    """Train a copy of ``model`` with cross-entropy; returns (model, history)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError("labels outside [0, K)")
    trained = model.copy().freeze(False)
    history = fit(trained, images, labels, cfg, loss="ce", on_epoch=on_epoch)
    return trained, history
