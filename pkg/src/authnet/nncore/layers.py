"""Layer primitives with explicit forward/backward passes.

Every layer stores the shape it accepts (without the batch axis) so a model
can check that consecutive layers chain.  Affine layers (``Conv2d``,
``Linear``, ``AvgPool2d``, ``Flatten``) also expose ``apply`` (a pure forward
with optional substituted weights) and ``vjp`` (a pure vector-Jacobian
product), which the bound propagation code reuses.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"
    has_params = False

    def __init__(self):
        self.in_shape: tuple[int, ...] | None = None
        self.out_shape: tuple[int, ...] | None = None
        self.frozen = False
        self._cache = None

    # parameter handling
    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def zero_grad(self):
        for g in self.grads():
            g[...] = 0.0

    def build(self, in_shape: tuple[int, ...], rng: np.random.Generator | None) -> tuple[int, ...]:
        self.in_shape = tuple(in_shape)
        self.out_shape = self._infer_out(self.in_shape)
        return self.out_shape

    def _infer_out(self, in_shape):
        return in_shape

    def spec(self) -> str:
        return self.kind

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, need_input: bool = True) -> np.ndarray:
        raise NotImplementedError

    def clear(self):
        self._cache = None


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.maximum(x, 0.0)  # propagates NaN, unlike np.where

    def backward(self, grad, need_input=True):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        return np.where(self._cache, grad, 0.0)


class AffineLayer(Layer):
    """Layers that are affine maps of their input."""

    def apply(self, x, weight=None, bias=True):
        raise NotImplementedError

    def vjp(self, g):
        raise NotImplementedError

    def bias_term(self, lam):
        """Return ``<lam, bias>`` per row of ``lam`` (shape [R, *out_shape])."""
        return np.zeros(lam.shape[0])

    def forward(self, x):
        self._cache = x.shape
        return self.apply(x)

    def backward(self, grad, need_input=True):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        return self.vjp(grad)


class Flatten(AffineLayer):
    kind = "flatten"

    def _infer_out(self, in_shape):
        return (int(np.prod(in_shape)),)

    def apply(self, x, weight=None, bias=True):
        return x.reshape(x.shape[0], -1)

    def vjp(self, g):
        return g.reshape((g.shape[0],) + self.in_shape)


class AvgPool2d(AffineLayer):
    kind = "avgpool"

    def __init__(self, kernel: int):
        super().__init__()
        self.kernel = int(kernel)

    def spec(self):
        return f"avgpool:{self.kernel}"

    def _infer_out(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"avgpool expects [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        k = self.kernel
        if h % k or w % k:
            raise ShapeError(f"avgpool kernel {k} does not divide spatial size {h}x{w}")
        return (c, h // k, w // k)

    def apply(self, x, weight=None, bias=True):
        n, c, h, w = x.shape
        k = self.kernel
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(self, g):
        k = self.kernel
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return up / (k * k)


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(AffineLayer):
    kind = "linear"
    has_params = True

    def __init__(self, out_features: int, in_features: int | None = None):
        super().__init__()
        self.out_features = int(out_features)
        self.in_features = in_features
        self.weight: np.ndarray | None = None
        self.bias: np.ndarray | None = None

    def spec(self):
        return f"linear:{self.out_features}"

    def _infer_out(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"linear expects flat input, got {in_shape}")
        if self.in_features is not None and self.in_features != in_shape[0]:
            raise ShapeError(f"linear declared {self.in_features} inputs, got {in_shape[0]}")
        self.in_features = in_shape[0]
        return (self.out_features,)

    def build(self, in_shape, rng):
        out = super().build(in_shape, rng)
        if rng is not None:
            self.weight = kaiming_uniform(rng, (self.out_features, self.in_features), self.in_features)
        else:
            self.weight = np.zeros((self.out_features, self.in_features))
        self.bias = np.zeros(self.out_features)
        self.gw = np.zeros_like(self.weight)
        self.gb = np.zeros_like(self.bias)
        return out

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.gw, self.gb]

    def apply(self, x, weight=None, bias=True):
        w = self.weight if weight is None else weight
        out = x @ w.T
        if bias:
            out = out + self.bias
        return out

    def vjp(self, g):
        return g @ self.weight

    def forward(self, x):
        self._cache = x
        return self.apply(x)

    def backward(self, grad, need_input=True):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x = self._cache
        if not self.frozen:
            self.gw += grad.T @ x
            self.gb += grad.sum(axis=0)
        return grad @ self.weight if need_input else None

    def bias_term(self, lam):
        return lam @ self.bias


class Conv2d(AffineLayer):
    kind = "conv"
    has_params = True

    def __init__(self, out_channels: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.weight: np.ndarray | None = None
        self.bias: np.ndarray | None = None

    def spec(self):
        return f"conv:{self.out_channels}:{self.kernel}:{self.stride}:{self.padding}"

    def _infer_out(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        k, s, p = self.kernel, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel {k} too large for input {h}x{w}")
        return (self.out_channels, ho, wo)

    def build(self, in_shape, rng):
        out = super().build(in_shape, rng)
        cin = self.in_shape[0]
        shape = (self.out_channels, cin, self.kernel, self.kernel)
        fan_in = cin * self.kernel * self.kernel
        self.weight = kaiming_uniform(rng, shape, fan_in) if rng is not None else np.zeros(shape)
        self.bias = np.zeros(self.out_channels)
        self.gw = np.zeros_like(self.weight)
        self.gb = np.zeros_like(self.bias)
        return out

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.gw, self.gb]

    def _cols(self, x):
        # [N, C, H, W] -> [N*Ho*Wo, C*k*k]
        p, k, s = self.padding, self.kernel, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)

    def apply(self, x, weight=None, bias=True):
        w = self.weight if weight is None else weight
        n = x.shape[0]
        _, ho, wo = self.out_shape
        out = self._cols(x) @ w.reshape(self.out_channels, -1).T
        out = out.reshape(n, ho, wo, self.out_channels)
        if bias:
            out = out + self.bias
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(self, g):
        n = g.shape[0]
        c, h, w = self.in_shape
        k, s, p = self.kernel, self.stride, self.padding
        _, ho, wo = self.out_shape
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        dcols = (gflat @ self.weight.reshape(self.out_channels, -1)).reshape(n, ho, wo, c, k, k)
        dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
        dx = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[i, j]
        if p:
            dx = dx[:, :, p:p + h, p:p + w]
        return dx

    def forward(self, x):
        self._cache = x
        return self.apply(x)

    def backward(self, grad, need_input=True):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        if not self.frozen:
            cols = self._cols(self._cache)
            gflat = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
            self.gw += (gflat.T @ cols).reshape(self.weight.shape)
            self.gb += gflat.sum(axis=0)
        return self.vjp(grad) if need_input else None

    def bias_term(self, lam):
        # lam: [R, Cout, Ho, Wo]
        return lam.sum(axis=(2, 3)) @ self.bias


def parse_layer(token: str) -> Layer:
    """Build a layer from its textual spec, e.g. ``conv:6:5:1:2``."""
    parts = token.strip().split(":")
    name, args = parts[0].lower(), [int(a) for a in parts[1:]]
    if name == "conv":
        return Conv2d(*args)
    if name == "relu":
        return ReLU()
    if name == "avgpool":
        return AvgPool2d(*args)
    if name == "flatten":
        return Flatten()
    if name == "linear":
        return Linear(*args)
    raise ValueError(f"unknown layer kind {name!r}")
