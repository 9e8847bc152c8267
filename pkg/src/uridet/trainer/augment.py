"""Training-time augmentation: axis flips applied to image and boxes together."""

from __future__ import annotations

import numpy as np
from PIL import Image

from uridet import boxcore


def flip_image(image, axis):
    """Mirror an ``(H, W, C)`` array horizontally or vertically."""
    if axis == "horizontal":
        return np.ascontiguousarray(image[:, ::-1])
    if axis == "vertical":
        return np.ascontiguousarray(image[::-1, :])
    raise ValueError(f"unknown flip axis {axis!r}")


def augment(image, boxes, flags, rng):
    """Mirror image and boxes together, each enabled axis with probability 1/2.

    ``flags`` is an iterable drawn from ``{"horizontal", "vertical"}``; the
    rng draw order is horizontal first, so a fixed seed fixes the outcome.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w = image.shape[:2]
    for axis in ("horizontal", "vertical"):
        if axis in flags and rng.random() < 0.5:
            image = flip_image(image, axis)
            boxes = boxcore.flip_box(boxes, w, h, axis)
    return image, boxes


def resize_with_boxes(image, boxes, out_w, out_h):
    """Bilinear-resize a uint8 image and rescale boxes to match."""
    h, w = image.shape[:2]
    if (w, h) == (out_w, out_h):
        return image, np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    resized = np.asarray(
        Image.fromarray(image).resize((out_w, out_h), Image.BILINEAR), dtype=np.uint8
    )
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0::2] *= out_w / w
    boxes[:, 1::2] *= out_h / h
    return resized, boxes
