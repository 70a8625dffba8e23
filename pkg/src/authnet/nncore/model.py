from __future__ import annotations

import copy
import hashlib

import numpy as np

from authnet.nncore.layers import AffineLayer, Layer, Linear, ShapeError, parse_layer

# Stage grouping follows the classic LeNet-5 naming C1, S2, C3, S4, C5, F6.
ARCHITECTURES = {
    "lenet": {
        "input_shape": (1, 28, 28),
        "layers": "conv:6:5:1:2,relu,avgpool:2,conv:16:5:1:0,relu,avgpool:2,"
        "conv:120:5:1:0,relu,flatten,linear:84,relu,linear:10",
        "stages": (2, 3, 5, 6, 8, 12),
    },
    "tiny-cnn": {
        "input_shape": (1, 12, 12),
        "layers": "conv:4:3:1:1,relu,avgpool:2,conv:8:3:1:1,relu,avgpool:2,"
        "conv:16:3:1:0,relu,flatten,linear:10",
        "stages": None,
    },
    "tiny-mlp": {
        "input_shape": (1, 12, 12),
        "layers": "flatten,linear:32,relu,linear:10",
        "stages": None,
    },
}


class SequentialModel:
    """Ordered list of layers mapping [N, *input_shape] to logits [N, K].

    ``stages`` optionally groups layers into coarse blocks (as end indices,
    exclusive); a split position given in stage units maps through it.
    """

    def __init__(self, layers: list[Layer], input_shape, num_classes: int | None = None,
                 seed: int | None = 0, stages=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        rng = np.random.default_rng(seed) if seed is not None else None
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.in_shape is not None and tuple(layer.in_shape) != shape:
                raise ShapeError(f"layer {i} ({layer.spec()}) accepts {layer.in_shape}, got {shape}")
            if layer.in_shape is None:
                try:
                    shape = layer.build(shape, rng)
                except ShapeError as exc:
                    raise ShapeError(f"layer {i} ({layer.spec()}): {exc}") from None
            else:
                shape = layer.out_shape
        self.output_shape = shape
        if num_classes is not None:
            last = self.layers[-1]
            if not isinstance(last, Linear) or last.out_features != num_classes:
                raise ShapeError(f"final layer must be linear with {num_classes} outputs")
        self.num_classes = num_classes
        self.stages = tuple(stages) if stages else tuple(range(1, len(self.layers) + 1))

    @property
    def arch(self) -> str:
        return ",".join(layer.spec() for layer in self.layers)

    def __len__(self):
        return len(self.layers)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def trainable(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(p, g) for layer in self.layers if not layer.frozen
                for p, g in zip(layer.params(), layer.grads())]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def freeze(self, frozen: bool = True):
        for layer in self.layers:
            layer.frozen = frozen
        return self

    def clear(self):
        for layer in self.layers:
            layer.clear()

    def copy(self) -> "SequentialModel":
        new = copy.deepcopy(self)
        new.clear()
        return new

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()


def build_model(arch: str = "lenet", seed: int = 0, num_classes: int | None = None,
                input_shape=None) -> SequentialModel:
    """Build a named architecture or a comma-separated layer spec string."""
    stages = None
    if arch in ARCHITECTURES:
        entry = ARCHITECTURES[arch]
        layers_spec, stages = entry["layers"], entry["stages"]
        input_shape = input_shape or entry["input_shape"]
    else:
        layers_spec = arch
        if input_shape is None:
            raise ValueError("custom architectures need an explicit input_shape")
    layers = [parse_layer(tok) for tok in layers_spec.split(",") if tok.strip()]
    if num_classes is not None and isinstance(layers[-1], Linear):
        layers[-1].out_features = num_classes
    if num_classes is None and isinstance(layers[-1], Linear):
        num_classes = layers[-1].out_features
    return SequentialModel(layers, input_shape, num_classes, seed=seed, stages=stages)


def forward(model: SequentialModel, x: np.ndarray, start: int = 0, stop: int | None = None,
            record: bool = False) -> np.ndarray:
    """Run layers ``start..stop`` on a batch.

    With ``record`` the layers keep the activations needed by ``backward``.
    """
    stop = len(model.layers) if stop is None else stop
    expected = model.input_shape if start == 0 else model.layers[start].in_shape
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != tuple(expected):
        raise ShapeError(f"layer {start} expects input {tuple(expected)}, got {x.shape[1:]}")
    for layer in model.layers[start:stop]:
        x = layer.forward(x) if record else _infer(layer, x)
    return x


def _infer(layer: Layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, AffineLayer):
        return layer.apply(x)
    return np.maximum(x, 0.0)


def backward(model: SequentialModel, grad_out: np.ndarray, start: int = 0,
             stop: int | None = None, input_grad: bool = True) -> np.ndarray | None:
    """Reverse-mode pass through recorded layers ``start..stop``.

    Parameter gradients are accumulated into each non-frozen layer; the
    gradient with respect to the input of layer ``start`` is returned unless
    ``input_grad`` is false.
    """
    stop = len(model.layers) if stop is None else stop
    g = grad_out
    for i in range(stop - 1, start - 1, -1):
        layer = model.layers[i]
        if layer._cache is None:
            raise RuntimeError("backward called before a recorded forward pass")
        g = layer.backward(g, need_input=input_grad or i > start)
    return g


def predict(model: SequentialModel, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    out = [forward(model, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def accuracy(model: SequentialModel, x: np.ndarray, labels: np.ndarray, batch_size: int = 1000) -> float:
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    preds = np.argmax(predict(model, x, batch_size), axis=1)
    return float(np.mean(preds == labels))
