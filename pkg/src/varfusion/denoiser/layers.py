"""Layers with hand-written reverse-mode gradients.

All layers act on a single image of shape ``(channels, rows, cols)``.  A
layer caches what its backward pass needs during ``forward`` and
``backward(dout)`` returns the input gradient while filling ``grads``.
"""
from __future__ import annotations

import math

import numpy as np


class Layer:
    params: dict
    grads: dict

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.grads = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _taps(x):
    """Zero-padded 3x3 neighbourhoods: ``out[c, 3*i + j] = pad(x)[c, i:i+h, j:j+w]`` flattened."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2), x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((c, 9, h, w), x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, 3 * i + j] = xp[:, i:i + h, j:j + w]
    return cols.reshape(c, 9, h * w)


class DepthwiseConv3x3(Layer):
    """Per-channel 3x3 cross-correlation with zero padding, no bias."""

    def __init__(self, channels: int, dtype=np.float64):
        super().__init__(dtype)
        self.channels = channels
        self.params["weight"] = np.zeros((channels, 3, 3), self.dtype)

    def init(self, rng):
        # fan-in of a depthwise filter is 3*3*1
        w = rng.normal(0.0, np.sqrt(2.0 / 9.0), (self.channels, 3, 3))
        self.params["weight"] = w.astype(self.dtype)

    def forward(self, x, training=False):
        if x.shape[0] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[0]}")
        c, h, w = x.shape
        self._cols = _taps(x)
        k = self.params["weight"].reshape(c, 1, 9)
        return np.matmul(k, self._cols).reshape(c, h, w)

    def backward(self, dout):
        c, h, w = dout.shape
        self.grads["weight"] = np.matmul(self._cols, dout.reshape(c, h * w, 1)).reshape(c, 3, 3)
        # the adjoint is a correlation with the flipped kernel
        kflip = self.params["weight"][:, ::-1, ::-1].reshape(c, 1, 9)
        return np.matmul(kflip, _taps(dout)).reshape(c, h, w)


class Pointwise(Layer):
    """1x1 convolution (channel mixing) with bias."""

    def __init__(self, c_in: int, c_out: int, dtype=np.float64):
        super().__init__(dtype)
        self.c_in, self.c_out = c_in, c_out
        self.params["weight"] = np.zeros((c_out, c_in), self.dtype)
        self.params["bias"] = np.zeros(c_out, self.dtype)

    def init(self, rng):
        w = rng.normal(0.0, np.sqrt(2.0 / self.c_in), (self.c_out, self.c_in))
        self.params["weight"] = w.astype(self.dtype)
        self.params["bias"] = np.zeros(self.c_out, self.dtype)

    def forward(self, x, training=False):
        if x.shape[0] != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {x.shape[0]}")
        c, h, w = x.shape
        x2 = x.reshape(c, -1)
        self._x2 = x2
        out = self.params["weight"] @ x2 + self.params["bias"][:, None]
        return out.reshape(self.c_out, h, w)

    def backward(self, dout):
        d2 = dout.reshape(self.c_out, -1)
        self.grads["weight"] = d2 @ self._x2.T
        self.grads["bias"] = d2.sum(axis=1)
        return (self.params["weight"].T @ d2).reshape(self.c_in, *dout.shape[1:])


class BatchNorm(Layer):
    """Per-channel normalisation over the spatial axes.

    Training mode uses the statistics of the current input and folds them
    into exponential running averages (``running = m*running + (1-m)*batch``);
    inference mode applies the running statistics as a fixed affine map.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float64):
        super().__init__(dtype)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.track_running = True
        self.init(None)

    def init(self, rng):
        self.params["gamma"] = np.ones(self.channels, self.dtype)
        self.params["beta"] = np.zeros(self.channels, self.dtype)
        self.running_mean = np.zeros(self.channels, self.dtype)
        self.running_var = np.ones(self.channels, self.dtype)

    def forward(self, x, training=False):
        g = self.params["gamma"][:, None, None]
        b = self.params["beta"][:, None, None]
        if training:
            mu = x.mean(axis=(1, 2))
            xc = x - mu[:, None, None]
            var = np.mean(xc * xc, axis=(1, 2))
            inv = 1 / np.sqrt(var + self.dtype.type(self.eps))
            if self.track_running:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1 - m) * mu
                self.running_var = m * self.running_var + (1 - m) * var
        else:
            xc = x - self.running_mean[:, None, None]
            inv = 1 / np.sqrt(self.running_var + self.dtype.type(self.eps))
        xhat = xc * inv[:, None, None]
        self._cache = (xhat, inv, training)
        return g * xhat + b

    def backward(self, dout):
        xhat, inv, training = self._cache
        self.grads["gamma"] = np.einsum("chw,chw->c", dout, xhat)
        self.grads["beta"] = dout.sum(axis=(1, 2))
        dxhat = dout * self.params["gamma"][:, None, None]
        if not training:
            return dxhat * inv[:, None, None]
        n = dout.shape[1] * dout.shape[2]
        s1 = dxhat.sum(axis=(1, 2))[:, None, None]
        s2 = np.einsum("chw,chw->c", dxhat, xhat)[:, None, None]
        return (inv[:, None, None] / n) * (n * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x, training=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


def l1_loss(pred, target):
    """``sum |pred - target|`` and its (sub)gradient ``sign(pred - target)``."""
    r = pred - target
    return float(np.abs(r).sum(dtype=np.float64)), np.sign(r)


def huber_loss(pred, target, delta: float = 1e-4):
    """Smoothed L1: quadratic within ``delta`` of zero, ``|r| - delta/2`` outside."""
    r = pred - target
    a = np.abs(r)
    val = np.where(a <= delta, 0.5 * r * r / delta, a - 0.5 * delta)
    # exact summation keeps finite-difference checks free of accumulation round-off
    return math.fsum(val.ravel().tolist()), np.clip(r / delta, -1.0, 1.0)
