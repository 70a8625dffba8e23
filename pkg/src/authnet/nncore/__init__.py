"""Deterministic float64 layer engine: forward/backward, losses, Adam, pruning."""

from authnet.nncore.layers import AvgPool2d, Conv2d, Flatten, Layer, Linear, ReLU, ShapeError
from authnet.nncore.losses import cross_entropy, mse, one_hot, softmax
from authnet.nncore.model import (
    ARCHITECTURES,
    SequentialModel,
    accuracy,
    backward,
    build_model,
    forward,
    predict,
)
from authnet.nncore.optim import AdamState, adam_step
from authnet.nncore.prune import magnitude_prune
from authnet.nncore.training import TrainConfig, TrainingError, fit, train_clean

__all__ = [
    "ARCHITECTURES", "AdamState", "AvgPool2d", "Conv2d", "Flatten", "Layer", "Linear", "ReLU",
    "SequentialModel", "ShapeError", "TrainConfig", "TrainingError", "accuracy", "adam_step",
    "backward", "build_model", "cross_entropy", "fit", "forward", "magnitude_prune", "mse",
    "one_hot", "predict", "softmax", "train_clean",
]
