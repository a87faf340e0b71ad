"""A fixed set of layers with hand-written forward and reverse passes.

Tensors are plain float64 numpy arrays shaped (channels, height, width) or
flat vectors. Layers hold their parameters but no per-call state: `forward`
returns a cache that `backward` consumes, so one network may be evaluated
from several threads at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapeMismatch, StaleCache

LAYER_KINDS = ("conv2d", "relu", "maxpool2x2", "global_avg_pool", "dense", "sigmoid", "dropout")


class Layer:
    kind: str = ""
    params: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def check_input(self, x: np.ndarray) -> None:
        pass

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, cache, dy, need_dx=True):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2d(Layer):
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, weights=None, biases=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.params = {
            "weights": np.zeros((out_channels, in_channels, 3, 3)) if weights is None else np.asarray(weights, float),
            "biases": np.zeros(out_channels) if biases is None else np.asarray(biases, float),
        }

    def output_shape(self, in_shape):
        return (self.out_channels,) + tuple(in_shape[1:])

    def check_input(self, x):
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ShapeMismatch(f"conv2d expects ({self.in_channels}, H, W), got {x.shape}")

    def forward(self, x, train=False, rng=None):
        c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        # im2col laid out as (C*9, H*W) so both products stay row-major
        cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w)
        wmat = self.params["weights"].reshape(self.out_channels, -1)
        y = wmat @ cols + self.params["biases"][:, None]
        return y.reshape(self.out_channels, h, w), (cols, x.shape)

    def backward(self, cache, dy, need_dx=True):
        cols, (c, h, w) = cache
        dyf = dy.reshape(self.out_channels, h * w)
        grads = {
            "weights": (dyf @ cols.T).reshape(self.params["weights"].shape),
            "biases": dyf.sum(axis=1),
        }
        if not need_dx:
            return grads, None
        wmat = self.params["weights"].reshape(self.out_channels, -1)
        dcols = (wmat.T @ dyf).reshape(c, 3, 3, h, w)
        dxp = np.zeros((c, h + 2, w + 2))
        for di in range(3):
            for dj in range(3):
                dxp[:, di : di + h, dj : dj + w] += dcols[:, di, dj]
        return grads, dxp[:, 1:-1, 1:-1]

    def __repr__(self):
        return f"Conv2d({self.in_channels}, {self.out_channels})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        return np.maximum(x, 0.0), x

    def backward(self, cache, dy, need_dx=True):
        return {}, dy * (cache > 0)


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Ties go to the lowest flat index within the window.
    """

    kind = "maxpool2x2"

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def check_input(self, x):
        if x.ndim != 3 or x.shape[1] < 2 or x.shape[2] < 2:
            raise ShapeMismatch(f"maxpool2x2 expects (C, H>=2, W>=2), got {x.shape}")

    @staticmethod
    def windows(x):
        c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        v = x[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2)
        return v.transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)

    @staticmethod
    def _corners(x):
        # the four window positions in flat order (0,0), (0,1), (1,0), (1,1)
        h2, w2 = x.shape[1] // 2, x.shape[2] // 2
        return [x[:, r : 2 * h2 : 2, s : 2 * w2 : 2] for r in (0, 1) for s in (0, 1)]

    def forward(self, x, train=False, rng=None):
        corners = self._corners(x)
        y = corners[0].copy()
        idx = np.zeros(y.shape, dtype=np.int8)
        for k in (1, 2, 3):
            better = corners[k] > y  # strict: ties keep the earlier index
            idx[better] = k
            np.maximum(y, corners[k], out=y)
        return y, (idx, x.shape, x)

    def backward(self, cache, dy, need_dx=True):
        idx, shape, _ = cache
        dx = np.zeros(shape)
        for k, view in enumerate(self._corners(dx)):
            view[...] = np.where(idx == k, dy, 0.0)
        return {}, dx


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def check_input(self, x):
        if x.ndim != 3:
            raise ShapeMismatch(f"global_avg_pool expects (C, H, W), got {x.shape}")

    def forward(self, x, train=False, rng=None):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, cache, dy, need_dx=True):
        c, h, w = cache
        return {}, np.broadcast_to((dy / (h * w))[:, None, None], cache).copy()


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, weights=None, biases=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "weights": np.zeros((out_features, in_features)) if weights is None else np.asarray(weights, float),
            "biases": np.zeros(out_features) if biases is None else np.asarray(biases, float),
        }

    def output_shape(self, in_shape):
        return (self.out_features,)

    def check_input(self, x):
        if x.shape != (self.in_features,):
            raise ShapeMismatch(f"dense expects ({self.in_features},), got {x.shape}")

    def forward(self, x, train=False, rng=None):
        return self.params["weights"] @ x + self.params["biases"], x

    def backward(self, cache, dy, need_dx=True):
        grads = {"weights": np.outer(dy, cache), "biases": dy.copy()}
        return grads, (self.params["weights"].T @ dy if need_dx else None)

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features})"


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False, rng=None):
        y = expit(x)
        return y, y

    def backward(self, cache, dy, need_dx=True):
        return {}, dy * cache * (1.0 - cache)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, cache, dy, need_dx=True):
        return {}, dy if cache is None else dy * cache

    def __repr__(self):
        return f"Dropout({self.rate})"


@dataclass
class ForwardCache:
    layer_caches: list
    input_shape: tuple
    output_shape: tuple
    activations: list = field(default_factory=list)


class Network:
    def __init__(self, layers: list[Layer], input_shape: tuple):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape

    def forward(self, x: np.ndarray, mode: str = "eval", seed=None, keep_activations=False):
        """Run the network; returns (output, cache).

        mode="train" enables dropout drawn from `seed`; "eval" is deterministic.
        """
        if mode not in ("eval", "train"):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise ShapeMismatch(f"layer 0: expected input {self.input_shape}, got {x.shape}")
        train = mode == "train"
        rng = np.random.default_rng(seed) if train else None
        caches = []
        acts = [x] if keep_activations else []
        for i, layer in enumerate(self.layers):
            try:
                layer.check_input(x)
            except ShapeMismatch as exc:
                raise ShapeMismatch(f"layer {i} ({layer.kind}): {exc}") from None
            x, cache = layer.forward(x, train, rng)
            caches.append(cache)
            if keep_activations:
                acts.append(x)
        return x, ForwardCache(caches, self.input_shape, x.shape, acts)

    def backward(self, cache: ForwardCache, upstream: np.ndarray, need_input_grad=True):
        """Gradients of <upstream, output> w.r.t. every parameter and the input."""
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != cache.output_shape or len(cache.layer_caches) != len(self.layers):
            raise StaleCache(
                f"upstream gradient shape {upstream.shape} does not match cached output {cache.output_shape}"
            )
        grads: list[dict] = [None] * len(self.layers)
        dy = upstream
        for i in range(len(self.layers) - 1, -1, -1):
            need_dx = need_input_grad or i > 0
            grads[i], dy = self.layers[i].backward(cache.layer_caches[i], dy, need_dx)
        return grads, dy

    @property
    def params(self) -> list[dict]:
        return [layer.params for layer in self.layers]

    def set_params(self, params: list[dict]) -> None:
        for layer, p in zip(self.layers, params):
            for name, value in p.items():
                if value.shape != layer.params[name].shape:
                    raise ShapeMismatch(f"{layer.kind} {name}: {value.shape} != {layer.params[name].shape}")
            layer.params = dict(p)

    def n_params(self) -> int:
        return sum(v.size for p in self.params for v in p.values())


def sgd_step(weights: list[dict], param_grads: list[dict], learning_rate: float) -> list[dict]:
    """Plain gradient descent, w <- w - lr * g; returns new arrays."""
    if len(weights) != len(param_grads):
        raise ShapeMismatch("parameter and gradient lists differ in length")
    new = []
    for w, g in zip(weights, param_grads):
        for k in w:
            if g[k].shape != w[k].shape:
                raise ShapeMismatch(f"{k}: gradient {g[k].shape} != weights {w[k].shape}")
        new.append({k: w[k] - learning_rate * g[k] for k in w})
    return new


def glorot_uniform(rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(network: Network, seed: int) -> None:
    """Glorot-uniform weights, zero biases, drawn in layer order."""
    rng = np.random.default_rng(seed)
    for layer in network.layers:
        if isinstance(layer, Conv2d):
            shape = layer.params["weights"].shape
            w = glorot_uniform(rng, shape, layer.in_channels * 9, layer.out_channels * 9)
        elif isinstance(layer, Dense):
            w = glorot_uniform(rng, layer.params["weights"].shape, layer.in_features, layer.out_features)
        else:
            continue
        layer.params = {"weights": w, "biases": np.zeros_like(layer.params["biases"])}


def kink_margins(network: Network, cache: ForwardCache) -> list[np.ndarray]:
    """Distance of every ReLU input and pooling window to its nearest kink.

    ReLU: |pre-activation|. Max-pool: gap between the two largest entries.
    Used by finite-difference checks to skip non-differentiable points.
    """
    out = []
    for layer, c in zip(network.layers, cache.layer_caches):
        if isinstance(layer, ReLU):
            out.append(np.abs(c))
        elif isinstance(layer, MaxPool2x2):
            win = np.sort(MaxPool2x2.windows(c[2]), axis=-1)
            out.append(win[..., -1] - win[..., -2])
    return out


def activation_pattern(network: Network, cache: ForwardCache) -> list[np.ndarray]:
    out = []
    for layer, c in zip(network.layers, cache.layer_caches):
        if isinstance(layer, ReLU):
            out.append(c > 0)
        elif isinstance(layer, MaxPool2x2):
            out.append(c[0])
    return out
