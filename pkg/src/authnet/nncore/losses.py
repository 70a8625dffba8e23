"""Loss functions returning ``(value, d value / d prediction)``."""

from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: np.ndarray, labels: np.ndarray, soft: bool = False):
    """Mean cross-entropy between softmax(logits) and one-hot ``labels``.

    ``soft=True`` accepts arbitrary probability rows as targets (used by the
    extraction attack's soft-label variant).
    """
    if logits.shape != labels.shape or logits.ndim != 2:
        raise ValueError(f"shape mismatch: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    if n < 1:
        raise ValueError("empty batch")
    if not soft:
        ok = np.all((labels == 0) | (labels == 1), axis=1) & (labels.sum(axis=1) == 1)
        if not np.all(ok):
            raise ValueError(f"label row {int(np.argmin(ok))} is not one-hot")
    logp = log_softmax(logits)
    loss = -float(np.sum(labels * logp)) / n
    grad = (softmax(logits) * labels.sum(axis=1, keepdims=True) - labels) / n
    return loss, grad


def mse(pred: np.ndarray, target: np.ndarray):
    """(1/N) * sum_i ||pred_i - target_i||^2 with N the leading extent."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.shape[0] if pred.ndim else 1
    diff = pred - target
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n
