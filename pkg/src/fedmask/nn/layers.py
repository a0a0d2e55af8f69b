"""Neural-network layers with explicit backward passes, all in float64.

Activations use a channels-last layout: image tensors are
(batch, height, width, channels), dense inputs are (batch, features).
Each layer caches what its backward pass needs during forward;
``backward(dy)`` returns the input gradient and fills ``layer.grads``.
With ``per_sample=True`` the parameter gradients keep a leading batch
axis, which is what per-sample sensitivity estimation consumes.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Layer:
    """Base class: holds named parameter arrays and their gradients."""

    kind = "base"
    param_order: tuple[str, ...] = ()

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, per_sample: bool = False) -> np.ndarray:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Non-trainable state (e.g. BN running statistics)."""
        return {}


class Dense(Layer):
    """Fully connected layer, x @ W + b on (batch, features) inputs."""

    kind = "Dense"
    param_order = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = he_init(rng, (in_features, out_features), in_features)
        self.params["bias"] = np.zeros(out_features)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Dense expects (batch, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy, per_sample=False):
        x = self._cache
        if per_sample:
            self.grads["weight"] = np.einsum("bi,bo->bio", x, dy)
            self.grads["bias"] = dy.copy()
        else:
            self.grads["weight"] = x.T @ dy
            self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"].T


class Conv2D(Layer):
    """3x3 convolution, stride 1, same padding, via im2col + one GEMM.

    Weight shape (3, 3, in_channels, out_channels) so the GEMM view
    ``weight.reshape(9 * in_channels, out_channels)`` is a free reshape.
    """

    kind = "Conv2D"
    param_order = ("weight", "bias")

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        rng = rng or np.random.default_rng(0)
        fan_in = 9 * in_channels
        self.params["weight"] = he_init(rng, (3, 3, in_channels, out_channels), fan_in)
        self.params["bias"] = np.zeros(out_channels)

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        b, h, w, c = x.shape
        xp = np.zeros((b, h + 2, w + 2, c))
        xp[:, 1 : h + 1, 1 : w + 1, :] = x
        cols = np.empty((b, h, w, 9, c))
        for k in range(9):
            i, j = divmod(k, 3)
            cols[:, :, :, k, :] = xp[:, i : i + h, j : j + w, :]
        return cols.reshape(b, h * w, 9 * c)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"Conv2D expects (batch, H, W, {self.in_channels}), got {x.shape}")
        b, h, w, _ = x.shape
        cols = self._im2col(x)
        wmat = self.params["weight"].reshape(9 * self.in_channels, self.out_channels)
        y = cols.reshape(b * h * w, -1) @ wmat + self.params["bias"]
        self._cache = (cols, (b, h, w))
        return y.reshape(b, h, w, self.out_channels)

    def backward(self, dy, per_sample=False):
        cols, (b, h, w) = self._cache
        cin, cout = self.in_channels, self.out_channels
        dyf = dy.reshape(b * h * w, cout)
        if per_sample:
            dw = np.einsum("bpk,bpf->bkf", cols, dy.reshape(b, h * w, cout))
            self.grads["weight"] = dw.reshape(b, 3, 3, cin, cout)
            self.grads["bias"] = dy.reshape(b, h * w, cout).sum(axis=1)
        else:
            dw = cols.reshape(b * h * w, 9 * cin).T @ dyf
            self.grads["weight"] = dw.reshape(3, 3, cin, cout)
            self.grads["bias"] = dyf.sum(axis=0)
        wmat = self.params["weight"].reshape(9 * cin, cout)
        dcols = (dyf @ wmat.T).reshape(b, h, w, 9, cin)
        dxp = np.zeros((b, h + 2, w + 2, cin))
        for k in range(9):
            i, j = divmod(k, 3)
            dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, k, :]
        return dxp[:, 1 : h + 1, 1 : w + 1, :]


class BatchNorm2D(Layer):
    """Per-channel batch normalization over (batch, H, W) with affine scale/shift.

    Train mode normalizes with batch statistics and updates the running
    statistics; eval mode normalizes with the running statistics only.
    Running statistics are non-trainable state and never enter the
    flattened parameter vector.
    """

    kind = "BatchNorm2D"
    param_order = ("gamma", "beta")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def state_arrays(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise ShapeError(f"BatchNorm2D expects (batch, H, W, {self.channels}), got {x.shape}")
        if train:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy, per_sample=False):
        xhat, inv_std, train = self._cache
        if per_sample:
            if train:
                raise ValueError("per-sample gradients require eval mode (batch statistics couple samples)")
            self.grads["gamma"] = (dy * xhat).sum(axis=(1, 2))
            self.grads["beta"] = dy.sum(axis=(1, 2))
        else:
            self.grads["gamma"] = (dy * xhat).sum(axis=(0, 1, 2))
            self.grads["beta"] = dy.sum(axis=(0, 1, 2))
        dxhat = dy * self.params["gamma"]
        if not train:
            return dxhat * inv_std
        n = dy.shape[0] * dy.shape[1] * dy.shape[2]
        s1 = dxhat.sum(axis=(0, 1, 2))
        s2 = (dxhat * xhat).sum(axis=(0, 1, 2))
        return (inv_std / n) * (n * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, dy, per_sample=False):
        return np.where(self._cache, dy, 0.0)


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x, train=False):
        y = 1.0 / (1.0 + np.exp(-x))
        self._cache = y
        return y

    def backward(self, dy, per_sample=False):
        y = self._cache
        return dy * y * (1.0 - y)


class AvgPool2D(Layer):
    """Parameter-free 2x2 average pooling (stride 2). Structural op, not maskable."""

    kind = "AvgPool2D"

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"AvgPool2D needs even spatial dims, got {h}x{w}")
        self._cache = (h, w)
        return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(self, dy, per_sample=False):
        dyr = np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2)
        return dyr * 0.25


class Upsample2D(Layer):
    """Parameter-free 2x nearest-neighbour upsampling. Structural op, not maskable."""

    kind = "Upsample2D"

    def forward(self, x, train=False):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, dy, per_sample=False):
        b, h, w, c = dy.shape
        return dy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))
