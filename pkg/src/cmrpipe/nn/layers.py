"""Network building blocks with explicit forward/backward passes.

Conventions: activations are NCHW float arrays; every layer's forward
returns (output, cache) and backward(dout, cache) returns (dinput, grads)
where grads maps the layer's parameter names to gradient arrays. No layer
mutates shared state in forward, so inference on a loaded model is safe
from multiple threads.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractViolation


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    # (N,C,H,W) -> (N*H*W, C*k*k) for stride-1 same-padding convolution
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


class Conv2d:
    """3x3 (or 1x1) stride-1 same-padding convolution with bias."""

    def __init__(self, cin: int, cout: int, ksize: int, rng: np.random.Generator,
                 dtype=np.float32):
        if ksize % 2 != 1:
            raise ContractViolation("only odd kernel sizes are supported")
        self.cin, self.cout, self.ksize = cin, cout, ksize
        fan_in = cin * ksize * ksize
        self.w = (rng.standard_normal((cout, cin, ksize, ksize))
                  * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x: np.ndarray):
        n, c, h, w = x.shape
        if c != self.cin:
            raise ContractViolation(f"conv expected {self.cin} channels, got {c}")
        cols = _im2col(x, self.ksize, self.ksize // 2)
        wmat = self.w.reshape(self.cout, -1).T
        y = cols @ wmat + self.b
        y = y.reshape(n, h, w, self.cout).transpose(0, 3, 1, 2)
        # x is cached by reference; cols are recomputed in backward to keep
        # the training-time memory footprint bounded.
        return np.ascontiguousarray(y), x

    def backward(self, dy: np.ndarray, cache):
        x = cache
        n, c, h, w = x.shape
        k, pad = self.ksize, self.ksize // 2
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * h * w, self.cout)
        cols = _im2col(x, k, pad)
        gw = (cols.T @ dy_mat).T.reshape(self.w.shape)
        gb = dy_mat.sum(axis=0)
        dcols = dy_mat @ self.w.reshape(self.cout, -1)
        dcols = dcols.reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return dx, {"w": gw, "b": gb}


class Dense:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.cin, self.cout = cin, cout
        self.w = (rng.standard_normal((cin, cout)) * np.sqrt(2.0 / cin)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x: np.ndarray):
        return x @ self.w + self.b, x

    def backward(self, dy: np.ndarray, cache):
        x = cache
        return dy @ self.w.T, {"w": x.T @ dy, "b": dy.sum(axis=0)}


class MaxPool2d:
    """k x k max pooling with stride k; spatial dims must divide k."""

    def __init__(self, k: int):
        self.k = k

    def params(self):
        return {}

    def forward(self, x: np.ndarray):
        n, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ContractViolation(f"pool {k} needs divisible spatial dims, got {h}x{w}")
        xr = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        xr = xr.reshape(n, c, h // k, w // k, k * k)
        idx = xr.argmax(axis=-1)  # first maximum wins on ties
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy: np.ndarray, cache):
        idx, shape = cache
        n, c, h, w = shape
        k = self.k
        dxr = np.zeros((n, c, h // k, w // k, k * k), dtype=dy.dtype)
        np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
        dx = dxr.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(shape), {}


class UpsampleNearest:
    """Integer-factor nearest-neighbour upsampling (exact adjoint in backward)."""

    def __init__(self, k: int):
        self.k = k

    def params(self):
        return {}

    def forward(self, x: np.ndarray):
        k = self.k
        return x.repeat(k, axis=2).repeat(k, axis=3), x.shape

    def backward(self, dy: np.ndarray, cache):
        n, c, h, w = cache
        k = self.k
        dx = dy.reshape(n, c, h, k, w, k).sum(axis=(3, 5))
        return dx, {}


class ReLU:
    def params(self):
        return {}

    def forward(self, x: np.ndarray):
        return np.maximum(x, 0), x > 0

    def backward(self, dy: np.ndarray, cache):
        return dy * cache, {}


class GlobalAvgPool:
    """(N,C,H,W) -> (N,C) spatial mean."""

    def params(self):
        return {}

    def forward(self, x: np.ndarray):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy: np.ndarray, cache):
        n, c, h, w = cache
        dx = np.broadcast_to(dy[:, :, None, None] / (h * w), cache).astype(dy.dtype)
        return dx.copy(), {}


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis of an NCHW array."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner)
