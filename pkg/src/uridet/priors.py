"""Anchor pyramids and multi-map default boxes.

Both detector families regress from fixed prior boxes tiled over feature
maps: the two-stage family from one anchor pyramid, the single-shot family
from per-map default boxes whose scales interpolate linearly between a
minimum and maximum fraction of the input size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor side lengths (pixels) and width:height aspect ratios."""

    scales: tuple = (128.0, 256.0, 512.0)
    ratios: tuple = (2.0, 1.0, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.scales or not self.ratios:
            raise ValueError("scales and ratios must be non-empty")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise ValueError("scales and ratios must be strictly positive")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be strictly increasing")

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class FeatureMapSpec:
    """Geometry of one feature map: ``stride`` input pixels per cell."""

    name: str
    stride: int
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.stride, self.height, self.width, self.channels) <= 0:
            raise ValueError(f"feature map {self.name!r} has a non-positive dimension")


@dataclass(frozen=True)
class DefaultBoxSpec:
    """Per-map default boxes with scales spread linearly over ``maps``."""

    s_min: float
    s_max: float
    maps: tuple  # ordered FeatureMapSpec
    ratios_per_map: tuple  # one aspect-ratio tuple per map

    def __post_init__(self):
        object.__setattr__(self, "maps", tuple(self.maps))
        object.__setattr__(
            self, "ratios_per_map", tuple(tuple(float(r) for r in rs) for rs in self.ratios_per_map)
        )
        if not 0.0 < self.s_min < self.s_max <= 1.0:
            raise ValueError(f"need 0 < s_min < s_max <= 1, got {self.s_min}, {self.s_max}")
        if len(self.maps) < 2:
            raise ValueError("at least 2 feature maps required")
        if len(self.ratios_per_map) != len(self.maps):
            raise ValueError("ratios_per_map must list one ratio set per map")

    def boxes_per_cell(self, k: int) -> int:
        # one box per ratio plus the extra geometric-mean scale box
        return len(self.ratios_per_map[k]) + 1

    def total_boxes(self) -> int:
        return sum(
            m.height * m.width * self.boxes_per_cell(k) for k, m in enumerate(self.maps)
        )


def _centered_boxes(cx, cy, w, h):
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def generate_anchors(fmap: FeatureMapSpec, spec: AnchorSpec):
    """Tile the anchor pyramid over a feature map.

    One anchor per (cell, scale, ratio), centered at ``((j+0.5)*stride,
    (i+0.5)*stride)`` with width ``s*sqrt(r)`` and height ``s/sqrt(r)`` so the
    ratio-1 area is exactly ``s**2``. Order is row-major over cells, then
    scale-major, then ratio, matching the layout of every prediction head.
    """
    scales = np.asarray(spec.scales, dtype=np.float64)
    ratios = np.asarray(spec.ratios, dtype=np.float64)
    ws = (scales[:, None] * np.sqrt(ratios)[None, :]).ravel()
    hs = (scales[:, None] / np.sqrt(ratios)[None, :]).ravel()
    cy = (np.arange(fmap.height, dtype=np.float64) + 0.5) * fmap.stride
    cx = (np.arange(fmap.width, dtype=np.float64) + 0.5) * fmap.stride
    cxg, cyg = np.meshgrid(cx, cy)  # (H, W)
    cxg = np.repeat(cxg.ravel(), len(ws))
    cyg = np.repeat(cyg.ravel(), len(ws))
    wt = np.tile(ws, fmap.height * fmap.width)
    ht = np.tile(hs, fmap.height * fmap.width)
    return _centered_boxes(cxg, cyg, wt, ht)


def default_box_scales(m: int, s_min: float, s_max: float):
    """Evenly spaced scales from ``s_min`` to ``s_max`` for ``m`` maps."""
    if m < 2:
        raise ValueError(f"need at least 2 maps, got {m}")
    k = np.arange(m, dtype=np.float64)
    out = s_min + (s_max - s_min) * k / (m - 1)
    out[0] = s_min
    out[-1] = s_max  # endpoints exact, untouched by rounding
    return out


def generate_default_boxes(spec: DefaultBoxSpec, input_size: float):
    """All default boxes for an ``input_size`` square input, unclipped.

    Per map ``k`` and cell, there is one box of side ``s_k * input_size`` per
    aspect ratio (width and height scaled by sqrt of the ratio) plus one
    ratio-1 box at the geometric mean of ``s_k`` and ``s_{k+1}`` (``s_max``
    beyond the last map). Cells iterate row-major; the extra box comes after
    the listed ratios. Boxes may extend past the image edge; clipping happens
    at decode time.
    """
    scales = default_box_scales(len(spec.maps), spec.s_min, spec.s_max)
    out = []
    for k, fmap in enumerate(spec.maps):
        s = scales[k] * input_size
        s_next = scales[k + 1] if k + 1 < len(spec.maps) else spec.s_max
        s_extra = np.sqrt(scales[k] * s_next) * input_size
        ratios = np.asarray(spec.ratios_per_map[k], dtype=np.float64)
        ws = np.append(s * np.sqrt(ratios), s_extra)
        hs = np.append(s / np.sqrt(ratios), s_extra)
        cy = (np.arange(fmap.height, dtype=np.float64) + 0.5) * fmap.stride
        cx = (np.arange(fmap.width, dtype=np.float64) + 0.5) * fmap.stride
        cxg, cyg = np.meshgrid(cx, cy)
        cxr = np.repeat(cxg.ravel(), len(ws))
        cyr = np.repeat(cyg.ravel(), len(ws))
        wt = np.tile(ws, fmap.height * fmap.width)
        ht = np.tile(hs, fmap.height * fmap.width)
        out.append(_centered_boxes(cxr, cyr, wt, ht))
    return np.concatenate(out, axis=0)
