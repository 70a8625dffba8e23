from __future__ import annotations

import numpy as np

from authnet.nncore.layers import Conv2d, Linear
from authnet.nncore.model import SequentialModel


def prune_mask(weight: np.ndarray, rate: float) -> np.ndarray:
    """Boolean mask of the ``rate`` fraction of smallest-|w| entries.

    The sort is stable, so ties go to the lower flat index and the mask for a
    lower rate is always a subset of the mask for a higher one.
    """
    flat = np.abs(weight).ravel()
    count = int(np.floor(rate * flat.size + 1e-9))
    mask = np.zeros(flat.size, dtype=bool)
    mask[np.argsort(flat, kind="stable")[:count]] = True
    return mask.reshape(weight.shape)


def magnitude_prune(model: SequentialModel, rate: float) -> SequentialModel:
    """Per-layer unstructured magnitude pruning of conv/linear weights."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"pruning rate {rate} outside [0, 1]")
    pruned = model.copy()
    for layer in pruned.layers:
        if isinstance(layer, (Conv2d, Linear)):
            layer.weight[prune_mask(layer.weight, rate)] = 0.0
    return pruned
