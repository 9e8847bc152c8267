"""Shallow convolutional backbone with named feature taps.

A stem-free stack of stages, each a 3x3 conv + ReLU followed by optional max
pooling. Every stage output is a named tap whose stride is the product of
the downsampling factors so far (always a power of two).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uridet.nets.layers import Conv2d, MaxPool2d, collect_params
from uridet.priors import FeatureMapSpec


@dataclass(frozen=True)
class BackboneConfig:
    """Per-stage channel counts, downsampling factors, and tap names."""

    channels: tuple = (8, 16, 32)
    downsample: tuple = (2, 2, 2)
    taps: tuple = ("c1", "c2", "c3")
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "downsample", tuple(int(d) for d in self.downsample))
        object.__setattr__(self, "taps", tuple(self.taps))
        if not (len(self.channels) == len(self.downsample) == len(self.taps)):
            raise ValueError("channels, downsample, and taps must have equal length")
        if len(set(self.taps)) != len(self.taps):
            raise ValueError("tap names must be unique")
        for d in self.downsample:
            if d < 1 or (d & (d - 1)) != 0:
                raise ValueError(f"downsample factors must be powers of two, got {d}")

    def tap_strides(self) -> dict:
        strides = {}
        s = 1
        for tap, d in zip(self.taps, self.downsample):
            s *= d
            strides[tap] = s
        return strides

    @property
    def max_stride(self) -> int:
        return int(np.prod(self.downsample))

    def tap_channels(self) -> dict:
        return dict(zip(self.taps, self.channels))


class Backbone:
    def __init__(self, config: BackboneConfig, rng):
        self.config = config
        self.convs = []
        self.pools = []
        cin = config.in_channels
        for i, (cout, d) in enumerate(zip(config.channels, config.downsample)):
            self.convs.append(Conv2d(f"backbone.stage{i}", cin, cout, rng=rng, relu=True))
            self.pools.append(MaxPool2d(d) if d > 1 else None)
            cin = cout
        self._pad_hw = (0, 0)

    def params(self):
        return collect_params(*self.convs)

    def pad_to_stride(self, image):
        """Zero-pad H/W up to a multiple of the max tap stride (bottom/right)."""
        s = self.config.max_stride
        _, h, w = image.shape
        ph = (-h) % s
        pw = (-w) % s
        self._pad_hw = (ph, pw)
        if ph or pw:
            image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        return image

    def forward(self, image):
        """Run all stages; returns ``{tap name: (C, H/stride, W/stride)}``."""
        x = self.pad_to_stride(np.asarray(image, dtype=np.float64))
        taps = {}
        for conv, pool, tap in zip(self.convs, self.pools, self.config.taps):
            x = conv.forward(x)
            if pool is not None:
                x = pool.forward(x)
            taps[tap] = x
        return taps

    def backward(self, tap_grads: dict):
        """Backpropagate summed tap gradients; accumulates parameter grads."""
        dx = None
        for conv, pool, tap in zip(
            reversed(self.convs), reversed(self.pools), reversed(self.config.taps)
        ):
            g = tap_grads.get(tap)
            if g is not None:
                dx = g if dx is None else dx + g
            if dx is None:
                # nothing deeper than this tap received a gradient
                continue
            if pool is not None:
                dx = pool.backward(dx)
            dx = conv.backward(dx)
        return dx

    def feature_specs(self, image_h, image_w) -> dict:
        """Tap FeatureMapSpecs for a given (pre-padding) input size."""
        s = self.config.max_stride
        h = image_h + ((-image_h) % s)
        w = image_w + ((-image_w) % s)
        specs = {}
        strides = self.config.tap_strides()
        for tap, c in self.config.tap_channels().items():
            st = strides[tap]
            specs[tap] = FeatureMapSpec(tap, st, h // st, w // st, c)
        return specs
