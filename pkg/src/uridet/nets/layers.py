"""Minimal trainable layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during forward, so the usage
contract is strictly forward-then-backward once per step. Parameter gradients
accumulate until :func:`zero_grads`; float64 end to end.
"""

from __future__ import annotations

import numpy as np

from uridet import kernels


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def collect_params(*layers):
    """Merge layer parameter dicts, insisting on unique names."""
    out = {}
    for layer in layers:
        for name, p in layer.params().items():
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r}")
            out[name] = p
    return out


def zero_grads(params):
    for p in params.values():
        p.grad[...] = 0.0


class Conv2d:
    """3x3/1x1 convolution over a single ``(C, H, W)`` tensor."""

    def __init__(self, name, cin, cout, ksize=3, stride=1, pad=1, rng=None, relu=False):
        self.name = name
        self.stride = stride
        self.pad = pad
        self.relu = relu
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * ksize * ksize
        self.w = Param(he_normal(rng, (cout, cin, ksize, ksize), fan_in))
        self.b = Param(np.zeros(cout))
        self._x = None
        self._mask = None

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def forward(self, x):
        self._x = x
        y = kernels.conv2d_forward(x, self.w.value, self.b.value, self.stride, self.pad)
        if self.relu:
            self._mask = y > 0.0
            y = y * self._mask
        return y

    def backward(self, dy):
        if self.relu:
            dy = dy * self._mask
        dx, dw, db = kernels.conv2d_backward(self._x, self.w.value, dy, self.stride, self.pad)
        self.w.grad += dw
        self.b.grad += db
        return dx


class MaxPool2d:
    def __init__(self, size=2, stride=None):
        self.size = size
        self.stride = stride if stride is not None else size
        self._shape = None
        self._arg = None

    def params(self):
        return {}

    def forward(self, x):
        self._shape = x.shape
        y, self._arg = kernels.maxpool2d_forward(x, self.size, self.stride)
        return y

    def backward(self, dy):
        _, h, w = self._shape
        return kernels.maxpool2d_backward(self._arg, dy, h, w)


class Linear:
    """Affine layer over a batch ``(N, D) -> (N, O)``."""

    def __init__(self, name, din, dout, rng=None, relu=False):
        self.name = name
        self.relu = relu
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = Param(he_normal(rng, (dout, din), din))
        self.b = Param(np.zeros(dout))
        self._x = None
        self._mask = None

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def forward(self, x):
        self._x = x
        y = x @ self.w.value.T + self.b.value
        if self.relu:
            self._mask = y > 0.0
            y = y * self._mask
        return y

    def backward(self, dy):
        if self.relu:
            dy = dy * self._mask
        self.w.grad += dy.T @ self._x
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
