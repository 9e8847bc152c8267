"""Box geometry primitives shared by every detector stage.

Boxes are ``[x_min, y_min, x_max, y_max]`` in continuous pixel coordinates,
origin at the top-left corner. Batch functions take ``(N, 4)`` float arrays;
nothing in here ever rounds to integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# log-size ratios are clamped before exponentiation so untrained heads
# cannot overflow decode
DELTA_CLAMP = 4.0


@dataclass(frozen=True, eq=False)
class Detection:
    """A class-labeled, scored box. ``class_id`` 0 is reserved for background."""

    box: np.ndarray
    class_id: int
    score: float

    def __post_init__(self):
        object.__setattr__(self, "box", np.asarray(self.box, dtype=np.float64))
        if self.class_id == 0:
            raise ValueError("class_id 0 is reserved for background")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """A class-labeled annotation box."""

    box: np.ndarray
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "box", np.asarray(self.box, dtype=np.float64))


def box_area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim == 1:
        return max(boxes[2] - boxes[0], 0.0) * max(boxes[3] - boxes[1], 0.0)
    w = np.clip(boxes[:, 2] - boxes[:, 0], 0.0, None)
    h = np.clip(boxes[:, 3] - boxes[:, 1], 0.0, None)
    return w * h


def is_valid_box(box) -> bool:
    box = np.asarray(box, dtype=np.float64)
    return bool(np.all(np.isfinite(box)) and box[2] > box[0] and box[3] > box[1])


def iou(a, b) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint or degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = box_area(a) + box_area(b) - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def iou_matrix(a, b):
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays -> ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def _centers(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    cx = boxes[..., 0] + 0.5 * w
    cy = boxes[..., 1] + 0.5 * h
    return cx, cy, w, h


def encode(gt, anchor):
    """Regression target taking ``anchor`` onto ``gt``.

    Center offsets are normalized by the anchor side lengths and sizes are
    natural-log ratios, the single delta convention used across the repo.
    """
    gt = np.asarray(gt, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    single = gt.ndim == 1
    gt = gt.reshape(-1, 4)
    anchor = anchor.reshape(-1, 4)
    gcx, gcy, gw, gh = _centers(gt)
    acx, acy, aw, ah = _centers(anchor)
    if np.any(gw <= 0.0) or np.any(gh <= 0.0):
        raise ValueError("ground-truth box has non-positive width or height")
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        raise ValueError("anchor box has non-positive width or height")
    delta = np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )
    return delta[0] if single else delta


def decode(delta, anchor, image_w, image_h):
    """Inverse of :func:`encode`, clipped to the image rectangle.

    Fully clipped-out boxes come back degenerate (zero width or height) and
    are the caller's job to discard.
    """
    delta = np.asarray(delta, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    single = delta.ndim == 1
    delta = delta.reshape(-1, 4)
    anchor = anchor.reshape(-1, 4)
    acx, acy, aw, ah = _centers(anchor)
    tw = np.clip(delta[:, 2], -DELTA_CLAMP, DELTA_CLAMP)
    th = np.clip(delta[:, 3], -DELTA_CLAMP, DELTA_CLAMP)
    cx = delta[:, 0] * aw + acx
    cy = delta[:, 1] * ah + acy
    w = np.exp(tw) * aw
    h = np.exp(th) * ah
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, float(image_w))
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, float(image_h))
    return out[0] if single else out


def clip_boxes(boxes, image_w, image_h):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(image_w))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(image_h))
    return boxes


def nms_indices(boxes, scores, iou_threshold, class_ids=None):
    """Greedy non-maximum suppression; returns kept indices.

    Candidates are visited by descending score with ties broken by ascending
    input index, and a candidate is dropped when it overlaps an already-kept
    box of the same class at IoU >= ``iou_threshold``. With ``class_ids``
    omitted, suppression is class-agnostic.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(boxes)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if class_ids is not None:
        # shift each class onto its own coordinate island so one agnostic
        # pass never suppresses across classes
        class_ids = np.asarray(class_ids, dtype=np.float64)
        span = float(np.max(np.abs(boxes))) + 1.0 if n else 1.0
        boxes = boxes + (class_ids * 2.0 * span)[:, None]
    x0, y0, x1, y1 = boxes.T
    areas = np.clip(x1 - x0, 0.0, None) * np.clip(y1 - y0, 0.0, None)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        if rest.size == 0:
            break
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        union = areas[i] + areas[rest] - inter
        ious = np.zeros_like(inter)
        np.divide(inter, union, out=ious, where=union > 0.0)
        order = rest[ious < iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def nms(dets, iou_threshold):
    """NMS over a list of :class:`Detection`, suppressing per class."""
    if not dets:
        return []
    boxes = np.stack([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    cls = np.array([d.class_id for d in dets])
    keep = nms_indices(boxes, scores, iou_threshold, class_ids=cls)
    return [dets[i] for i in keep]


def flip_box(box, image_w, image_h, axis):
    """Mirror a box inside an ``image_w`` x ``image_h`` image.

    ``axis`` is ``"horizontal"`` (mirror x) or ``"vertical"`` (mirror y).
    """
    box = np.asarray(box, dtype=np.float64)
    single = box.ndim == 1
    box = box.reshape(-1, 4)
    out = box.copy()
    if axis == "horizontal":
        out[:, 0] = image_w - box[:, 2]
        out[:, 2] = image_w - box[:, 0]
    elif axis == "vertical":
        out[:, 1] = image_h - box[:, 3]
        out[:, 3] = image_h - box[:, 1]
    else:
        raise ValueError(f"unknown flip axis {axis!r}")
    return out[0] if single else out
