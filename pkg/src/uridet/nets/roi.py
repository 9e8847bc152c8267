"""ROI feature extraction and the per-region classification head.

``roi_pool`` turns an arbitrary-size region of a feature map into a fixed
``pool_h x pool_w`` grid by per-bin max. ``MsFuse`` pools the same region
from three backbone depths, L2-normalizes each pooled tensor across channels
(with a learnable per-channel scale), concatenates, and projects back down
with a learned 1x1 compression so the downstream head keeps its input width.
"""

from __future__ import annotations

import numpy as np

from uridet import kernels
from uridet.nets.layers import Linear, Param, collect_params

_L2_EPS = 1e-12


def roi_pool(features, roi, stride, pool_h, pool_w):
    """Pool one ROI (image coordinates) from a ``(C, H, W)`` feature map."""
    roi = np.asarray(roi, dtype=np.float64) / float(stride)
    pooled, _ = kernels.roi_max_pool_forward(features, roi, pool_h, pool_w)
    return pooled


class RoiPoolOp:
    """Batched ROI max pooling with a scatter-add backward pass."""

    def __init__(self, pool_h, pool_w):
        self.pool_h = pool_h
        self.pool_w = pool_w
        self._args = None
        self._shape = None

    def forward(self, features, rois, stride):
        self._shape = features.shape
        n = len(rois)
        c = features.shape[0]
        out = np.empty((n, c, self.pool_h, self.pool_w))
        self._args = np.empty((n, c, self.pool_h, self.pool_w), dtype=np.int64)
        scaled = np.asarray(rois, dtype=np.float64) / float(stride)
        for i in range(n):
            out[i], self._args[i] = kernels.roi_max_pool_forward(
                features, scaled[i], self.pool_h, self.pool_w
            )
        return out

    def backward(self, dy):
        _, h, w = self._shape
        dfeat = np.zeros(self._shape)
        for i in range(len(dy)):
            dfeat += kernels.roi_max_pool_backward(self._args[i], dy[i], h, w)
        return dfeat


class _L2NormScale:
    """Channel-axis L2 normalization with a learnable per-channel scale."""

    def __init__(self, name, channels):
        self.scale = Param(np.ones(channels))
        self.name = name
        self._x = None
        self._r = None

    def params(self):
        return {f"{self.name}.scale": self.scale}

    def forward(self, x):
        # x: (N, C, ph, pw); normalize over C at each (n, i, j)
        self._x = x
        self._r = np.sqrt((x * x).sum(axis=1, keepdims=True) + _L2_EPS)
        return (x / self._r) * self.scale.value[None, :, None, None]

    def backward(self, dy):
        s = self.scale.value[None, :, None, None]
        xn = self._x / self._r
        self.scale.grad += (dy * xn).sum(axis=(0, 2, 3))
        g = dy * s
        dot = (g * self._x).sum(axis=1, keepdims=True)
        return g / self._r - self._x * dot / (self._r**3)


class MsFuse:
    """Multi-depth ROI feature fusion: pool, normalize, concatenate, compress."""

    def __init__(self, tap_channels, compress_channels, pool_h, pool_w, rng):
        if len(tap_channels) != 3:
            raise ValueError(f"ms fusion needs exactly 3 taps, got {len(tap_channels)}")
        self.pool_h = pool_h
        self.pool_w = pool_w
        self.compress_channels = compress_channels
        self.pools = [RoiPoolOp(pool_h, pool_w) for _ in tap_channels]
        self.norms = [
            _L2NormScale(f"msfuse.norm{i}", c) for i, c in enumerate(tap_channels)
        ]
        total = int(sum(tap_channels))
        self.project = Linear("msfuse.project", total, compress_channels, rng=rng)
        self._split = np.cumsum(tap_channels)[:-1]
        self._n = None

    def params(self):
        return collect_params(*self.norms, self.project)

    def forward(self, tap_features, rois, tap_strides):
        """``tap_features``/``tap_strides``: the three fusion taps, shallow to deep."""
        normed = []
        for pool, norm, feat, stride in zip(self.pools, self.norms, tap_features, tap_strides):
            pooled = pool.forward(feat, rois, stride)
            normed.append(norm.forward(pooled))
        cat = np.concatenate(normed, axis=1)  # (N, sumC, ph, pw)
        self._n = cat.shape[0]
        flat = cat.transpose(0, 2, 3, 1).reshape(-1, cat.shape[1])
        proj = self.project.forward(flat)
        return (
            proj.reshape(self._n, self.pool_h, self.pool_w, self.compress_channels)
            .transpose(0, 3, 1, 2)
        )

    def backward(self, dy):
        """Returns one feature-map gradient per fusion tap."""
        flat = dy.transpose(0, 2, 3, 1).reshape(-1, self.compress_channels)
        dcat = self.project.backward(flat)
        dcat = dcat.reshape(self._n, self.pool_h, self.pool_w, -1).transpose(0, 3, 1, 2)
        grads = []
        for norm, pool, piece in zip(self.norms, self.pools, np.split(dcat, self._split, axis=1)):
            dpooled = norm.backward(np.ascontiguousarray(piece))
            grads.append(pool.backward(dpooled))
        return grads


class RoiHead:
    """Per-ROI classifier: flatten, hidden layer, class logits + per-class deltas."""

    def __init__(self, in_channels, pool_h, pool_w, num_classes, hidden, rng):
        self.num_classes = num_classes
        din = in_channels * pool_h * pool_w
        self.fc = Linear("roihead.fc", din, hidden, rng=rng, relu=True)
        self.cls = Linear("roihead.cls", hidden, num_classes + 1, rng=rng)
        self.reg = Linear("roihead.reg", hidden, 4 * num_classes, rng=rng)
        self._in_shape = None

    def params(self):
        return collect_params(self.fc, self.cls, self.reg)

    def forward(self, roi_feats):
        """``(N, C, ph, pw) -> (logits (N, C+1), deltas (N, num_classes, 4))``."""
        self._in_shape = roi_feats.shape
        h = self.fc.forward(roi_feats.reshape(len(roi_feats), -1))
        logits = self.cls.forward(h)
        deltas = self.reg.forward(h).reshape(-1, self.num_classes, 4)
        return logits, deltas

    def backward(self, dlogits, ddeltas):
        dh = self.cls.backward(dlogits)
        dh = dh + self.reg.backward(ddeltas.reshape(len(ddeltas), -1))
        dflat = self.fc.backward(dh)
        return dflat.reshape(self._in_shape)
