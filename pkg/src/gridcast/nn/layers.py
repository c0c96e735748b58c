"""Differentiable layers on numpy arrays.

Activations flow channels-last, shape (B, H, W, C): the channel axis is
contiguous, so the convolution reduces to one flat GEMM plus shifted slab
adds, and batch-norm broadcasts without reshapes. Parameters keep
conventional shapes (kernels are (F, C, kh, kw)).

Every layer caches what its backward pass needs during forward; one backward
per forward. Set GRIDCAST_DEBUG=1 to assert finite activations after every
layer.
"""

from __future__ import annotations

import os

import numpy as np

DEBUG = os.environ.get("GRIDCAST_DEBUG", "") == "1"


def _check_finite(name: str, arr: np.ndarray) -> None:
    if DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values after layer {name}")


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2D:
    """k x k cross-correlation with same padding and stride 1 (k odd).

    The horizontal taps are unrolled into the channel axis (k slab copies),
    one GEMM contracts channels-and-horizontal-taps against all vertical taps
    at once, and the k vertical contributions are summed as row-shifted slabs.
    This keeps the GEMM at the exact k*k*C*F contraction size with only
    O(k * C) sized intermediates.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dtype=np.float64, zero_init: bool = False):
        if kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        fan_in = in_channels * kernel_size * kernel_size
        if zero_init:
            self.kernel = np.zeros((out_channels, in_channels, self.k, self.k), dtype=dtype)
        else:
            self.kernel = he_normal(rng, (out_channels, in_channels, self.k, self.k),
                                    fan_in, dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _kmat(self) -> np.ndarray:
        # rows (j, c): horizontal tap and input channel; cols (i, f)
        k, c, f = self.k, self.in_channels, self.out_channels
        return np.ascontiguousarray(
            self.kernel.transpose(3, 1, 2, 0).reshape(k * c, k * f))

    def _expand_cols(self, x: np.ndarray) -> np.ndarray:
        """(B, H, W, C) -> (B, H, W, k, C): horizontal taps into channels."""
        b, h, w, c = x.shape
        k, pad = self.k, self.k // 2
        xj = np.empty((b, h, w, k, c), dtype=x.dtype)
        for j in range(k):
            d = j - pad
            if d < 0:
                xj[:, :, :-d, j, :] = 0.0
                xj[:, :, -d:, j, :] = x[:, :, :d, :]
            elif d == 0:
                xj[:, :, :, j, :] = x
            else:
                xj[:, :, -d:, j, :] = 0.0
                xj[:, :, :-d, j, :] = x[:, :, d:, :]
        return xj

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ValueError(f"Conv2D expects (B,H,W,C) input, got shape {x.shape}")
        if x.shape[3] != self.in_channels:
            raise ValueError(
                f"Conv2D expects {self.in_channels} input channels, got {x.shape[3]}")
        b, h, w, c = x.shape
        k, f, pad = self.k, self.out_channels, self.k // 2
        if k == 1:
            flat = x.reshape(-1, c)
            y = (flat @ self._kmat()).reshape(b, h, w, f)
            y += self.bias
            self._cache = (flat, (b, h, w))
            _check_finite("conv2d", y)
            return y
        xj = self._expand_cols(x)
        zall = (xj.reshape(-1, k * c) @ self._kmat()).reshape(b, h, w, k, f)
        y = np.empty((b, h, w, f), dtype=x.dtype)
        y[:] = zall[:, :, :, pad, :]
        for i in range(k):
            d = i - pad
            if d < 0:
                y[:, -d:, :, :] += zall[:, :d, :, i, :]
            elif d > 0:
                y[:, :-d, :, :] += zall[:, d:, :, i, :]
        y += self.bias
        self._cache = (xj, (b, h, w))
        _check_finite("conv2d", y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cached, (b, h, w) = self._cache
        self._cache = None
        c, k, f, pad = self.in_channels, self.k, self.out_channels, self.k // 2
        if dy.shape != (b, h, w, f):
            raise ValueError(f"gradient shape {dy.shape} != output {(b, h, w, f)}")
        self.grads["bias"] = dy.sum(axis=(0, 1, 2)).astype(self.bias.dtype)
        if k == 1:
            flat = cached
            dy_flat = dy.reshape(-1, f)
            dw = flat.T @ dy_flat  # (C, F)
            self.grads["kernel"] = np.ascontiguousarray(dw.T).reshape(self.kernel.shape)
            return (dy_flat @ self._kmat().T).reshape(b, h, w, c)
        xj = cached
        # vertical scatter: dz[:, u, :, i, :] = dy[:, u - i + pad, :, :]
        dz = np.empty((b, h, w, k, f), dtype=dy.dtype)
        for i in range(k):
            d = i - pad
            if d < 0:
                dz[:, :d, :, i, :] = dy[:, -d:, :, :]
                dz[:, d:, :, i, :] = 0.0
            elif d == 0:
                dz[:, :, :, i, :] = dy
            else:
                dz[:, d:, :, i, :] = dy[:, :-d, :, :]
                dz[:, :d, :, i, :] = 0.0
        xj_flat = xj.reshape(-1, k * c)
        dz_flat = dz.reshape(-1, k * f)
        dw = xj_flat.T @ dz_flat  # ((j,c), (i,f))
        self.grads["kernel"] = np.ascontiguousarray(
            dw.reshape(k, c, k, f).transpose(3, 1, 2, 0))
        dxj = (dz_flat @ self._kmat().T).reshape(b, h, w, k, c)
        # horizontal gather-back: dx[:, :, u, :] += dxj[:, :, u + j - pad, j, :]
        dx = np.empty((b, h, w, c), dtype=dy.dtype)
        dx[:] = dxj[:, :, :, pad, :]
        for j in range(k):
            d = j - pad
            if d < 0:
                dx[:, :, :d, :] += dxj[:, :, -d:, j, :]
            elif d > 0:
                dx[:, :, d:, :] += dxj[:, :, :-d, j, :]
        return dx

    def params(self) -> dict[str, np.ndarray]:
        return {"kernel": self.kernel, "bias": self.bias}

    def n_params(self) -> int:
        return self.kernel.size + self.bias.size


class BatchNorm:
    """Per-channel batch normalization over (B, H, W) with running statistics."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.99,
                 dtype=np.float64):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise ValueError(f"BatchNorm expects (B,H,W,{self.channels}), got {x.shape}")
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization needs batch size >= 2 in train mode")
            m = x.shape[0] * x.shape[1] * x.shape[2]
            mu = x.mean(axis=(0, 1, 2))
            xh = np.subtract(x, mu, out=np.empty_like(x))
            var = np.einsum("bhwc,bhwc->c", xh, xh) / m
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xh *= inv_std.astype(x.dtype)
            mom = self.momentum
            self.running_mean = (mom * self.running_mean + (1.0 - mom) * mu).astype(
                self.running_mean.dtype)
            self.running_var = (mom * self.running_var + (1.0 - mom) * var).astype(
                self.running_var.dtype)
            self._cache = (xh, inv_std, True)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xh = np.subtract(x, self.running_mean, out=np.empty_like(x))
            xh *= inv_std.astype(x.dtype)
            self._cache = (xh, inv_std, False)
        y = np.multiply(xh, self.gamma, out=np.empty_like(xh))
        y += self.beta
        _check_finite("batch_norm", y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        xh, inv_std, trained = self._cache
        self._cache = None
        dgamma = np.einsum("bhwc,bhwc->c", dy, xh)
        self.grads["gamma"] = dgamma.astype(self.gamma.dtype)
        self.grads["beta"] = dy.sum(axis=(0, 1, 2)).astype(self.beta.dtype)
        g = (self.gamma * inv_std).astype(xh.dtype)
        if not trained:
            return dy * g
        m = dy.shape[0] * dy.shape[1] * dy.shape[2]
        dy_mean = dy.mean(axis=(0, 1, 2))
        # reuse the cached buffer: dx = g * (dy - dy_mean - xh * dgamma / m)
        xh *= (dgamma / m).astype(xh.dtype)
        np.subtract(dy, xh, out=xh)
        xh -= dy_mean.astype(xh.dtype)
        xh *= g
        return xh

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def n_params(self) -> int:
        return self.gamma.size + self.beta.size


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        # in place: callers hand over ownership of the incoming activation
        self._mask = x > 0
        return np.maximum(x, 0, out=x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        mask = self._mask
        self._mask = None
        dy *= mask
        return dy


class Dense:
    """Affine map y = x W^T + b on (B, in) inputs."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = he_normal(rng, (out_features, in_features), in_features, dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self.grads: dict[str, np.ndarray] = {}
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"Dense expects (B,{self.in_features}) input, got {x.shape}")
        self._x = x
        y = x @ self.weight.T + self.bias
        _check_finite("dense", y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        if x is None:
            raise RuntimeError("backward called before forward")
        self.grads["weight"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        self._x = None
        return dy @ self.weight

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def n_params(self) -> int:
        return self.weight.size + self.bias.size


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. pred."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad
